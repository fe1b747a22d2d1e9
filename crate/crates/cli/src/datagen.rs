use std::path::{Path, PathBuf};

use vidpred_core::datagen::{generate_bouncing_sprites, generate_panning_scene, PanConfig, ShiftMode, SpriteConfig, SpriteStyle};

use crate::error::{usage, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Kind {
    /// Digits or squares bouncing off the frame borders.
    Sprites,
    /// A periodic texture translating at constant velocity.
    Panning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Style {
    Digits,
    Squares,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Shift {
    Exact,
    Bilinear,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of sequences.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Frames per sequence (at least 2).
    #[arg(long, default_value_t = 25)]
    t: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Output file, relative to the output root. Default: data/<kind>.vpd
    #[arg(long)]
    output: Option<PathBuf>,

    /// [sprites] number of sprites per sequence.
    #[arg(long, help_heading = "Sprites")]
    sprites: Option<usize>,
    /// [sprites] sprite box side in pixels.
    #[arg(long, help_heading = "Sprites")]
    sprite_size: Option<usize>,
    /// [sprites] maximum speed in pixels per frame.
    #[arg(long, help_heading = "Sprites")]
    speed: Option<f64>,
    /// [sprites] std-dev in radians of the direction change at each bounce.
    #[arg(long, help_heading = "Sprites")]
    bounce: Option<f64>,
    #[arg(long, value_enum, help_heading = "Sprites")]
    style: Option<Style>,

    /// [panning] displacement per frame as `dx,dy`.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true, help_heading = "Panning")]
    velocity: Option<(f64, f64)>,
    /// [panning] number of sinusoidal texture components.
    #[arg(long, help_heading = "Panning")]
    components: Option<usize>,
    /// [panning] largest spatial frequency in cycles per frame.
    #[arg(long, help_heading = "Panning")]
    max_frequency: Option<i32>,
    #[arg(long, value_enum, help_heading = "Panning")]
    shift: Option<Shift>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected dx,dy, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

impl Args {
    fn sprite_flags(&self) -> bool {
        self.sprites.is_some() || self.sprite_size.is_some() || self.speed.is_some() || self.bounce.is_some() || self.style.is_some()
    }

    fn panning_flags(&self) -> bool {
        self.velocity.is_some() || self.components.is_some() || self.max_frequency.is_some() || self.shift.is_some()
    }
}

pub fn run(root: &Path, args: Args) -> Result<(), CliError> {
    let dataset = match args.kind {
        Kind::Sprites => {
            if args.panning_flags() {
                return Err(usage("--velocity, --components, --max-frequency and --shift only apply to --kind panning"));
            }
            let d = SpriteConfig::default();
            let cfg = SpriteConfig {
                num_sprites: args.sprites.unwrap_or(d.num_sprites),
                sprite_size: args.sprite_size.unwrap_or(d.sprite_size),
                speed_range: args.speed.unwrap_or(d.speed_range),
                bounce_randomization: args.bounce.unwrap_or(d.bounce_randomization),
                style: match args.style {
                    Some(Style::Squares) => SpriteStyle::Squares,
                    Some(Style::Digits) => SpriteStyle::Digits,
                    None => d.style,
                },
            };
            generate_bouncing_sprites(args.seed, args.n, args.t, args.size, &cfg)?
        }
        Kind::Panning => {
            if args.sprite_flags() {
                return Err(usage("--sprites, --sprite-size, --speed, --bounce and --style only apply to --kind sprites"));
            }
            let d = PanConfig::default();
            let cfg = PanConfig {
                velocity: args.velocity.unwrap_or(d.velocity),
                components: args.components.unwrap_or(d.components),
                max_frequency: args.max_frequency.unwrap_or(d.max_frequency),
                shift: match args.shift {
                    Some(Shift::Bilinear) => ShiftMode::Bilinear,
                    Some(Shift::Exact) => ShiftMode::Exact,
                    None => d.shift,
                },
            };
            generate_panning_scene(args.seed, args.n, args.t, args.size, &cfg)?
        }
    };
    let default_name = match args.kind {
        Kind::Sprites => "data/sprites.vpd",
        Kind::Panning => "data/panning.vpd",
    };
    let path = root.join(args.output.unwrap_or_else(|| PathBuf::from(default_name)));
    dataset.save(&path)?;
    let [n, t, c, h, w] = dataset.meta.shape;
    println!("wrote {} ({n} sequences of {t} frames, {c}x{h}x{w})", path.display());
    Ok(())
}
