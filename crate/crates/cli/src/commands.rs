use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use patchlikely::analysis::{
    compare_contexts, minmax_patches, nll_heatmap, percentile_rank, render_hermann_grid, score_patches, sweep_target,
    BarPolarity, ChannelMode, Direction, ScoredPatch, Template,
};
use patchlikely::data_io::{load_image, save_image, Image8};
use patchlikely::flow::{bits_per_dim, FlowConfig};
use patchlikely::generation::{generate_illusion, ManipulationConfig, Mask, ETA_INCREASE};
use patchlikely::synth::{write_corpus, SceneConfig};
use patchlikely::training::{load_checkpoint, train as run_training, Checkpoint, PatchDataset, TrainConfig};

use crate::config::FileConfig;
use crate::{CliError, ExplainArgs, GenerateArgs, GridArgs, HeatmapArgs, Illusion, MinmaxArgs, ScoreArgs, SynthArgs, TrainArgs};

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out, text: std::fmt::Arguments) -> Result<(), CliError> {
    out.write_fmt(text)
        .and_then(|()| out.write_all(b"\n"))
        .map_err(|e| CliError::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let ck = load_checkpoint(path)?;
    info!("loaded {} (model {:?}, step {})", path.display(), ck.config(), ck.step);
    Ok(ck)
}

pub fn train(a: &TrainArgs, file: &FileConfig, out: Out) -> Result<(), CliError> {
    let defaults = TrainConfig::default();
    let flow = FlowConfig {
        patch_size: file.resolve(a.patch_size, "patch_size", defaults.flow.patch_size)?,
        channels: 3,
        steps: file.resolve(a.flow_steps, "flow_steps", defaults.flow.steps)?,
        hidden_width: file.resolve(a.hidden_width, "hidden_width", defaults.flow.hidden_width)?,
    };
    let cfg = TrainConfig {
        flow,
        batch_size: file.resolve(a.batch_size, "batch_size", defaults.batch_size)?,
        steps: file.resolve(a.steps, "steps", defaults.steps)?,
        learning_rate: file.resolve(a.learning_rate, "learning_rate", defaults.learning_rate)?,
        warmup_steps: file.resolve(a.warmup_steps, "warmup_steps", defaults.warmup_steps)?,
        checkpoint_every: file.resolve(a.checkpoint_every, "checkpoint_every", defaults.checkpoint_every)?,
        checkpoint_path: Some(a.out.clone()),
        seed: file.resolve(a.seed, "seed", defaults.seed)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.log_every == 0 {
        return Err(CliError::Usage("--log-every must be positive".into()));
    }
    info!("resolved config: {cfg:?}");

    let dataset = match (&a.corpus, &a.image) {
        (Some(dir), _) => PatchDataset::from_corpus(dir, flow.patch_size)?,
        (None, Some(img)) => PatchDataset::from_image(img, flow.patch_size)?,
        (None, None) => unreachable!("clap enforces a source"),
    };
    info!("{} training image(s)", dataset.len());
    let resume = a.resume.as_deref().map(open_checkpoint).transpose()?;

    let dims = flow.dims();
    emit(out, format_args!("step,nll_nats,bits_per_dim"))?;
    let mut failure = None;
    let last = cfg.steps.saturating_sub(1);
    run_training(&cfg, &dataset, resume, |m| {
        if failure.is_none() && (m.step % a.log_every == 0 || m.step == last) {
            let bpd = bits_per_dim(m.nll, dims, 256);
            if let Err(e) = emit(out, format_args!("{},{},{}", m.step, m.nll, bpd)) {
                failure = Some(e);
            }
        }
    })?;
    failure.map_or(Ok(()), Err)
}

pub fn score(a: &ScoreArgs, out: Out) -> Result<(), CliError> {
    let ck = open_checkpoint(&a.ckpt)?;
    let img = load_image(&a.image)?;
    let p = ck.config().patch_size;
    if img.width() < p || img.height() < p {
        return Err(CliError::Failed(format!(
            "{}: {}x{} is smaller than the {p}px patch",
            a.image.display(),
            img.width(),
            img.height()
        )));
    }
    let (x, y) = a.patch.unwrap_or(((img.width() - p) / 2, (img.height() - p) / 2));
    if x + p > img.width() || y + p > img.height() {
        return Err(CliError::Usage(format!(
            "patch at {x},{y} does not fit in the {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let nll = score_patches(&[img.crop(x, y, p, p)?], &ck.params)?[0];
    emit(out, format_args!("x,y,nll_nats,bits_per_dim"))?;
    emit(out, format_args!("{x},{y},{nll},{}", bits_per_dim(nll, ck.config().dims(), 256)))
}

/// Tiles patches into rows of `cols`, separated by 1px white lines.
fn mosaic(patches: &[ScoredPatch], cols: usize) -> Result<Image8, CliError> {
    let p = patches.first().map_or(1, |s| s.patch.width());
    let cols = cols.min(patches.len()).max(1);
    let rows = patches.len().div_ceil(cols).max(1);
    let mut img = Image8::filled(cols * (p + 1) + 1, rows * (p + 1) + 1, [255; 3]);
    for (i, s) in patches.iter().enumerate() {
        let (ox, oy) = ((i % cols) * (p + 1) + 1, (i / cols) * (p + 1) + 1);
        for y in 0..p {
            for x in 0..p {
                img.set(ox + x, oy + y, s.patch.get(x, y));
            }
        }
    }
    Ok(img)
}

pub fn minmax(a: &MinmaxArgs, file: &FileConfig, out: Out) -> Result<(), CliError> {
    let k = file.resolve(a.k, "k", 100)?;
    let stride = file.resolve(a.stride, "stride", 1)?;
    if k == 0 || stride == 0 {
        return Err(CliError::Usage("--k and --stride must be positive".into()));
    }
    info!("resolved config: k={k} stride={stride}");
    let ck = open_checkpoint(&a.ckpt)?;
    let img = load_image(&a.image)?;
    let mm = minmax_patches(&img, &ck.params, k, stride)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    save_image(&mosaic(&mm.most_likely, 10)?, a.out_dir.join("most_likely.png"))?;
    save_image(&mosaic(&mm.least_likely, 10)?, a.out_dir.join("least_likely.png"))?;
    let csv = a.out_dir.join("ranking.csv");
    let mut w = create(&csv)?;
    let io = |e| CliError::io(&csv, e);
    writeln!(w, "kind,rank,x,y,nll_nats").map_err(io)?;
    for (kind, list) in [("most_likely", &mm.most_likely), ("least_likely", &mm.least_likely)] {
        for (r, s) in list.iter().enumerate() {
            writeln!(w, "{kind},{r},{},{},{}", s.x, s.y, s.nll).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    emit(
        out,
        format_args!(
            "wrote {} most and {} least likely patches to {}",
            mm.most_likely.len(),
            mm.least_likely.len(),
            a.out_dir.display()
        ),
    )
}

#[derive(Serialize)]
struct HeatmapMeta<'a> {
    image: &'a str,
    checkpoint_sha256: String,
    rows: usize,
    cols: usize,
    stride: usize,
    patch_size: usize,
    normalization: &'static str,
    nll_min: f64,
    nll_max: f64,
}

pub fn heatmap(a: &HeatmapArgs, file: &FileConfig, out: Out) -> Result<(), CliError> {
    let stride = file.resolve(a.stride, "stride", 8)?;
    if stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    info!("resolved config: stride={stride}");
    let ck = open_checkpoint(&a.ckpt)?;
    let img = load_image(&a.image)?;
    let map = nll_heatmap(&img, &ck.params, stride)?;
    let (png, norm) = map.to_image();
    save_image(&png, &a.out)?;
    let csv = a.out.with_extension("csv");
    let mut w = create(&csv)?;
    map.write_csv(&mut w).and_then(|()| w.flush()).map_err(|e| CliError::io(&csv, e))?;
    let meta = HeatmapMeta {
        image: &a.image.display().to_string(),
        checkpoint_sha256: hash_file(&a.ckpt)?,
        rows: map.rows,
        cols: map.cols,
        stride,
        patch_size: map.patch_size,
        normalization: "linear min-max: nll_min -> 0, nll_max -> 255",
        nll_min: norm.min,
        nll_max: norm.max,
    };
    let json = a.out.with_extension("json");
    write_file(&json, format!("{}\n", serde_json::to_string_pretty(&meta).unwrap()).as_bytes())?;
    emit(out, format_args!("{}x{} heatmap written to {}", map.rows, map.cols, a.out.display()))
}

fn build_template(illusion: Illusion, mode: ChannelMode, context: Option<&str>) -> Result<Template, CliError> {
    match illusion {
        Illusion::Contrast => {
            let surround = context.unwrap_or("128");
            let level: u8 = surround
                .parse()
                .map_err(|_| CliError::Usage(format!("contrast context must be a level 0-255, got {surround:?}")))?;
            Ok(Template::contrast(level, mode))
        }
        Illusion::Whites | Illusion::Hermann if mode != ChannelMode::Gray => Err(CliError::Usage(format!(
            "{illusion:?} templates are grayscale; --channel {mode} is not supported"
        ))),
        Illusion::Whites => {
            let polarity: BarPolarity = context
                .unwrap_or("white_bar")
                .parse()
                .map_err(|e: patchlikely::Error| CliError::Usage(e.to_string()))?;
            Ok(Template::whites(polarity))
        }
        Illusion::Hermann => {
            if context.is_some() {
                return Err(CliError::Usage("the hermann template takes no --context".into()));
            }
            Ok(Template::hermann_cross())
        }
    }
}

pub fn explain(a: &ExplainArgs, out: Out) -> Result<(), CliError> {
    let mode: ChannelMode = a.channel.parse().map_err(|e: patchlikely::Error| CliError::Usage(e.to_string()))?;
    let template = build_template(a.illusion, mode, a.context.as_deref())?;
    let versus = a
        .versus
        .as_deref()
        .map(|v| build_template(a.illusion, mode, Some(v)))
        .transpose()?;
    if mode == ChannelMode::HsvHue {
        log::warn!("hue is circular but swept linearly: levels 0 and 255 are neighbours on the hue circle");
    }
    let ck = open_checkpoint(&a.ckpt)?;
    let sweep = sweep_target(&template, &ck.params)?;
    let mut w = create(&a.out)?;
    sweep.write_csv(&mut w).and_then(|()| w.flush()).map_err(|e| CliError::io(&a.out, e))?;
    emit(out, format_args!("argmax_target,{}", sweep.argmax()))?;
    if let Some(t) = a.target {
        emit(out, format_args!("percentile_rank,{t},{}", percentile_rank(&sweep, t)))?;
    }
    if let (Some(other), Some(t)) = (versus, a.target) {
        let b = sweep_target(&other, &ck.params)?;
        let c = compare_contexts(&sweep, &b, t)?;
        let verdict = match c.direction {
            Direction::AHigher => "context appears higher",
            Direction::BHigher => "versus appears higher",
            Direction::Tie => "tie",
        };
        emit(out, format_args!("comparison,{t},{},{},{verdict}", c.rank_a, c.rank_b))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GenerateMeta {
    eta: f64,
    stride: usize,
    patch_size: usize,
    checkpoint_sha256: String,
    mask_sha256: String,
    image_sha256: String,
}

pub fn generate(a: &GenerateArgs, file: &FileConfig, out: Out) -> Result<(), CliError> {
    let eta = file.resolve(a.eta, "eta", ETA_INCREASE)?;
    let stride = file.resolve(a.stride, "stride", 8)?;
    if stride == 0 || !eta.is_finite() {
        return Err(CliError::Usage("--stride must be positive and --eta finite".into()));
    }
    let ck = open_checkpoint(&a.ckpt)?;
    let cfg = ManipulationConfig {
        eta,
        stride,
        patch_size: ck.config().patch_size,
    };
    info!("resolved config: {cfg:?}");
    let img = load_image(&a.image)?;
    let mask = Mask::from_image(&load_image(&a.mask)?);
    if mask.count() == mask.width() * mask.height() {
        log::warn!("mask covers the whole image; output equals input");
    }
    let result = generate_illusion(&img, &mask, &ck.params, &cfg)?;
    save_image(&result, &a.out)?;
    let meta = GenerateMeta {
        eta,
        stride,
        patch_size: cfg.patch_size,
        checkpoint_sha256: hash_file(&a.ckpt)?,
        mask_sha256: hash_file(&a.mask)?,
        image_sha256: hash_file(&a.image)?,
    };
    let sidecar = a.out.with_extension("jsonl");
    write_file(&sidecar, format!("{}\n", serde_json::to_string(&meta).unwrap()).as_bytes())?;
    emit(out, format_args!("wrote {}", a.out.display()))
}

pub fn hermann_grid(a: &GridArgs) -> Result<(), CliError> {
    let img = render_hermann_grid(a.size, a.block, a.bar).map_err(|e| CliError::Usage(e.to_string()))?;
    save_image(&img, &a.out)?;
    Ok(())
}

pub fn synth_corpus(a: &SynthArgs, file: &FileConfig, out: Out) -> Result<(), CliError> {
    let seed = file.resolve(a.seed, "seed", 0)?;
    let cfg = SceneConfig {
        width: a.width,
        height: a.height,
        ..SceneConfig::default()
    };
    let paths = write_corpus(&a.out_dir, a.count, &cfg, seed)?;
    emit(out, format_args!("wrote {} images to {}", paths.len(), a.out_dir.display()))
}
