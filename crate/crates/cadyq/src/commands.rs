//! Command implementations. Each returns what it produced so the binary
//! and the tests share one code path.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cadyq_core::cost::CostLedger;
use cadyq_core::data::{box_downsample, synthetic_set, PairedDataset};
use cadyq_core::heatmap;
use cadyq_core::network::{Mode, SrNetwork};
use cadyq_core::pipeline::{assemble, gradient_variance, report, ImageReport, Tiled};
use cadyq_core::tiling::{extract_tiles, plan_tiles};
use cadyq_core::train::{pretrain_teacher, train_student, StepRecord};
use cadyq_core::Tensor;
use rayon::prelude::*;

use crate::config::Config;
use crate::imageio::{list_pngs, load_png, save_heatmap, save_png};
use crate::model::{self, ModelFile};
use crate::{CliError, Result};

/// Seed offset of the held-out synthetic images.
const HELDOUT_SALT: u64 = 0x00E7_A1D5;

/// Side of one tile in bit-map heatmaps.
pub const HEATMAP_CELL: usize = 16;

/// `manifest` line printed by every command.
pub fn manifest_line(command: &str, config_hash: &str, seed: Option<u64>, model_hash: &str) -> String {
    let seed = seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    format!("manifest command={command} config_hash={config_hash} seed={seed} model_sha256={model_hash}")
}

/// Training pairs: the PNGs of `data_dir` or the synthetic set.
pub fn training_data(cfg: &Config) -> Result<PairedDataset> {
    let images = match &cfg.data_dir {
        Some(dir) => {
            let paths = list_pngs(dir)?;
            if paths.is_empty() {
                return Err(CliError::NoData(format!("no PNG images in {}", dir.display())));
            }
            paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?
        }
        None => synthetic_set(cfg.train.seed, cfg.synthetic_count, cfg.synthetic_size, cfg.synthetic_size),
    };
    Ok(PairedDataset::from_hr(images, cfg.net.scale)?)
}

/// Held-out synthetic HR images, disjoint from the training seed stream.
pub fn heldout_images(cfg: &Config) -> Vec<(String, Tensor)> {
    synthetic_set(cfg.train.seed ^ HELDOUT_SALT, cfg.heldout_count, cfg.synthetic_size, cfg.synthetic_size)
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("heldout_{i:03}"), t))
        .collect()
}

pub fn pretrain(cfg: &Config, observe: impl FnMut(&StepRecord)) -> Result<(SrNetwork, Vec<StepRecord>)> {
    let data = training_data(cfg)?;
    let mut net = SrNetwork::new(cfg.net.clone(), Mode::TEACHER, cfg.train.seed)?;
    let history = pretrain_teacher(&mut net, &data, &cfg.pretrain_config(), observe)?;
    Ok((net, history))
}

/// Refuses a teacher whose architecture differs from the config.
pub fn check_teacher(cfg: &Config, teacher: &SrNetwork) -> Result<()> {
    if teacher.cfg != cfg.net {
        return Err(CliError::Manifest(format!(
            "teacher architecture {:?} does not match the config {:?}",
            teacher.cfg, cfg.net
        )));
    }
    Ok(())
}

pub fn train(cfg: &Config, teacher: &SrNetwork, observe: impl FnMut(&StepRecord)) -> Result<(SrNetwork, Vec<StepRecord>)> {
    check_teacher(cfg, teacher)?;
    let data = training_data(cfg)?;
    Ok(train_student(teacher, &data, &cfg.train, observe)?)
}

/// Tiles `lr` and runs the tiles in parallel; the result equals the
/// sequential pipeline.
pub fn super_resolve_parallel(net: &SrNetwork, lr: &Tensor, tile: usize, overlap: usize) -> Result<Tiled> {
    let s = lr.shape();
    let plan = plan_tiles(s.w, s.h, tile, overlap)?;
    let outputs = extract_tiles(lr, &plan)?
        .par_iter()
        .map(|t| net.infer(t))
        .collect::<cadyq_core::Result<Vec<(Tensor, CostLedger)>>>()?;
    Ok(assemble(plan, outputs, net.cfg.scale)?)
}

/// One evaluated image.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub name: String,
    pub report: ImageReport,
    pub tiled: Tiled,
    pub lr: Tensor,
}

/// Crops `hr` to a multiple of the scale, downsamples it, super-resolves
/// the result by tiles and scores it against the crop.
pub fn evaluate(net: &SrNetwork, name: &str, hr: &Tensor, tile: usize, overlap: usize) -> Result<Evaluated> {
    let r = net.cfg.scale;
    let s = hr.shape();
    let hr = hr.crop(0, 0, s.h / r * r, s.w / r * r)?;
    let lr = box_downsample(&hr, r)?;
    let tiled = super_resolve_parallel(net, &lr, tile, overlap)?;
    let report = report(&tiled, &hr)?;
    Ok(Evaluated { name: name.to_string(), report, tiled, lr })
}

pub const METRICS_NOTE: &str = "# fqr and bitops_g per image; fqr averages all (tile, layer) pairs of the image unweighted, and pooled figures average all pairs of all images";

pub fn write_metrics(path: &Path, rows: &[Evaluated]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{METRICS_NOTE}").map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["image", "psnr_db", "ssim", "fqr", "bitops_g", "n_tiles"])?;
    for e in rows {
        let r = &e.report;
        w.write_record([
            e.name.clone(),
            r.psnr_db.to_string(),
            r.ssim.to_string(),
            r.fqr.to_string(),
            r.bitops_g.to_string(),
            r.n_tiles.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Every ledger entry of every image.
pub fn write_ledger(path: &Path, rows: &[Evaluated]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image", "tile", "layer", "chosen_bit", "weight_bits", "expected_bit", "macs"])?;
    for e in rows {
        for l in &e.tiled.ledger.entries {
            w.write_record([
                e.name.clone(),
                l.patch_id.to_string(),
                l.layer_id.to_string(),
                l.chosen_bit.to_string(),
                l.weight_bits.to_string(),
                l.expected_bit.to_string(),
                l.macs.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_history(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "total", "l1", "bit", "kd", "kdf", "w_reg", "fqr", "mean_expected_bit"])?;
    for h in history {
        let l = &h.loss;
        w.write_record(
            [h.step as f64, l.total, l.l1, l.bit, l.kd, l.kdf, l.w_reg, h.fqr, h.mean_expected_bit].map(|v| v.to_string()),
        )?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Renders the per-tile mean chosen bit on the candidate range; float32
/// tiles saturate at the top colour.
pub fn write_bitmap(path: &Path, net: &SrNetwork, e: &Evaluated) -> Result<()> {
    let b = &net.cfg.candidate_bits;
    let (lo, hi) = (b[0] as f64, b[b.len() - 1] as f64);
    let map = heatmap::render(&e.tiled.ledger, &e.tiled.plan, lo, hi, HEATMAP_CELL)?;
    save_heatmap(path, &map)
}

/// Aggregate over a set of evaluated images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Pooled over every (tile, layer) pair of every image.
    pub fqr: f64,
    /// Mean per image.
    pub bitops_g: f64,
    /// Mean over the images the tile fits in; NaN when it fits none.
    pub grad_var: f64,
}

pub fn summarize(rows: &[Evaluated], tile: usize) -> Result<Summary> {
    if rows.is_empty() {
        return Err(CliError::NoData("nothing was evaluated".into()));
    }
    let n = rows.len() as f64;
    let mut pooled = CostLedger::new();
    for e in rows {
        pooled.entries.extend(e.tiled.ledger.entries.iter().cloned());
    }
    let vars: Vec<f64> = rows.iter().filter_map(|e| gradient_variance(&e.lr, tile).ok()).collect();
    Ok(Summary {
        psnr_db: rows.iter().map(|e| e.report.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|e| e.report.ssim).sum::<f64>() / n,
        fqr: pooled.fqr()?,
        bitops_g: rows.iter().map(|e| e.report.bitops_g).sum::<f64>() / n,
        grad_var: if vars.is_empty() { f64::NAN } else { vars.iter().sum::<f64>() / vars.len() as f64 },
    })
}

/// Loads the PNGs of `dir`, warning about and skipping unreadable files.
pub fn load_eval_images(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for p in list_pngs(dir)? {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match load_png(&p) {
            Ok(t) => out.push((name, t)),
            Err(e) => eprintln!("warning: skipping {e}"),
        }
    }
    Ok(out)
}

/// Evaluation options of `cadyq eval`.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub tile: usize,
    pub overlap: usize,
    pub mode: Option<Mode>,
    pub bitmap_dir: Option<PathBuf>,
    pub sr_dir: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
}

/// Evaluates every readable image; images that fail are skipped with a
/// warning. No usable image is a no-data error.
pub fn eval_images(net: &SrNetwork, images: &[(String, Tensor)], opts: &EvalOptions) -> Result<Vec<Evaluated>> {
    let mut rows = Vec::new();
    for (name, hr) in images {
        match evaluate(net, name, hr, opts.tile, opts.overlap) {
            Ok(e) => rows.push(e),
            Err(e @ (CliError::Core(_) | CliError::Config(_))) => eprintln!("warning: skipping {name}: {e}"),
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        return Err(CliError::NoData("no image could be evaluated".into()));
    }
    Ok(rows)
}

/// Runs `cadyq eval` and returns the manifest line.
pub fn run_eval(model_path: &Path, images_dir: &Path, out: &Path, opts: &EvalOptions) -> Result<String> {
    let (mut m, hash) = model::load(model_path)?;
    if let Some(mode) = opts.mode {
        m.net.mode = mode;
    }
    let images = load_eval_images(images_dir)?;
    if images.is_empty() {
        return Err(CliError::NoData(format!("no readable PNG images in {}", images_dir.display())));
    }
    let rows = eval_images(&m.net, &images, opts)?;
    write_metrics(out, &rows)?;
    if let Some(p) = &opts.ledger {
        write_ledger(p, &rows)?;
    }
    for (dir, bits) in [(&opts.bitmap_dir, true), (&opts.sr_dir, false)] {
        let Some(dir) = dir else { continue };
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for e in &rows {
            if bits {
                write_bitmap(&dir.join(format!("{}_bits.png", e.name)), &m.net, e)?;
            } else {
                save_png(&dir.join(format!("{}_sr.png", e.name)), &e.tiled.sr)?;
            }
        }
    }
    Ok(manifest_line("eval", &m.config_hash, None, &hash))
}

fn write_model(out: &Path, net: SrNetwork, cfg: &Config, command: &str) -> Result<String> {
    let hash = model::save(out, &ModelFile { net, config_hash: cfg.hash() })?;
    let line = manifest_line(command, &cfg.hash(), Some(cfg.train.seed), &hash);
    let sidecar = sidecar(out, "manifest");
    std::fs::write(&sidecar, format!("{line}\n{}", cfg.serialize())).map_err(|e| CliError::io(&sidecar, e))?;
    Ok(line)
}

/// `<out>.<ext>` next to `out`.
pub fn sidecar(out: &Path, ext: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".{ext}"));
    PathBuf::from(s)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Config::parse(&text)
}

fn progress(label: &'static str, total: u64) -> impl FnMut(&StepRecord) {
    let every = (total / 10).max(1);
    move |r: &StepRecord| {
        if r.step % every == 0 || r.step + 1 == total {
            eprintln!(
                "{label} step {}/{total}: loss {:.5} l1 {:.5} fqr {:.3} mean bit {:.3}",
                r.step + 1,
                r.loss.total,
                r.loss.l1,
                r.fqr,
                r.mean_expected_bit
            );
        }
    }
}

/// Runs `cadyq pretrain`: writes the teacher, its history and manifest.
pub fn run_pretrain(cfg: &Config, out: &Path, history: Option<&Path>) -> Result<String> {
    let (net, h) = pretrain(cfg, progress("pretrain", cfg.pretrain_iterations))?;
    write_history(&history.map(Path::to_path_buf).unwrap_or_else(|| sidecar(out, "history.csv")), &h)?;
    write_model(out, net, cfg, "pretrain")
}

/// Runs `cadyq train` from a saved teacher.
pub fn run_train(cfg: &Config, teacher: &Path, out: &Path, history: Option<&Path>) -> Result<String> {
    let (t, _) = model::load(teacher)?;
    let (net, h) = train(cfg, &t.net, progress("train", cfg.train.iterations))?;
    write_history(&history.map(Path::to_path_buf).unwrap_or_else(|| sidecar(out, "history.csv")), &h)?;
    write_model(out, net, cfg, "train")
}

/// Parameters `cadyq sweep` can vary. `patch_size` is the evaluation tile
/// side; the other two retrain the student.
pub const SWEEP_PARAMS: [&str; 3] = ["w_reg_init", "patch_size", "candidate_bits"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub summary: Summary,
}

/// A teacher for `cfg` built from the weights of `base`, which may use a
/// different candidate set. Clip scales of shared bit-widths are copied.
fn adapt_teacher(base: &SrNetwork, cfg: &Config) -> Result<SrNetwork> {
    if base.cfg.candidate_bits == cfg.net.candidate_bits {
        return Ok(base.clone());
    }
    let mut net = SrNetwork::uninitialized(cfg.net.clone(), Mode::TEACHER)?;
    net.allocate();
    net.head_w.clone_from(&base.head_w);
    net.head_b.clone_from(&base.head_b);
    net.tail_w.clone_from(&base.tail_w);
    net.tail_b.clone_from(&base.tail_b);
    for (dst, src) in net.blocks.iter_mut().zip(&base.blocks) {
        for (d, s) in [(&mut dst.conv1, &src.conv1), (&mut dst.conv2, &src.conv2)] {
            d.weight.clone_from(&s.weight);
            d.bias.clone_from(&s.bias);
            for q in &mut d.module.quantizers {
                if let Some(sq) = s.module.quantizers.iter().find(|sq| sq.bits == q.bits) {
                    q.scale = sq.scale;
                }
            }
        }
    }
    Ok(net)
}

/// Trains (or, for `patch_size`, evaluates) one configuration per value
/// and summarizes it on `images`.
pub fn sweep(
    cfg: &Config,
    teacher: &SrNetwork,
    param: &str,
    values: &[String],
    images: &[(String, Tensor)],
) -> Result<Vec<SweepRow>> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(CliError::Config(format!("cannot sweep `{param}`; expected one of {}", SWEEP_PARAMS.join(", "))));
    }
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        c.set(if param == "patch_size" { "tile_size" } else { param }, v)?;
        c.validate()?;
        configs.push(c);
    }
    let shared = if param == "patch_size" {
        Some(train(cfg, teacher, progress("sweep train", cfg.train.iterations))?.0)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(values.len());
    for (v, c) in values.iter().zip(&configs) {
        let student = match &shared {
            Some(s) => s.clone(),
            None => {
                let t = adapt_teacher(teacher, c)?;
                train(c, &t, progress("sweep train", c.train.iterations))?.0
            }
        };
        let opts = EvalOptions { tile: c.tile_size, overlap: c.tile_overlap, mode: None, bitmap_dir: None, sr_dir: None, ledger: None };
        let evaluated = eval_images(&student, images, &opts)?;
        let summary = summarize(&evaluated, c.tile_size)?;
        eprintln!("sweep {param}={v}: psnr {:.3} fqr {:.3}", summary.psnr_db, summary.fqr);
        rows.push(SweepRow { param: param.to_string(), value: v.clone(), summary });
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["param", "value", "psnr_db", "ssim", "fqr", "bitops_g", "grad_var"])?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.param.clone(),
            r.value.clone(),
            s.psnr_db.to_string(),
            s.ssim.to_string(),
            s.fqr.to_string(),
            s.bitops_g.to_string(),
            s.grad_var.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs `cadyq sweep`. Without a teacher file one is pretrained from the
/// config; without an image directory the held-out synthetic set is used.
pub fn run_sweep(
    cfg: &Config,
    param: &str,
    values: &[String],
    out: &Path,
    teacher: Option<&Path>,
    images_dir: Option<&Path>,
) -> Result<String> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(CliError::Config(format!("cannot sweep `{param}`; expected one of {}", SWEEP_PARAMS.join(", "))));
    }
    let (t, hash) = match teacher {
        Some(p) => {
            let (m, h) = model::load(p)?;
            (m.net, h)
        }
        None => {
            let net = pretrain(cfg, progress("pretrain", cfg.pretrain_iterations))?.0;
            let h = model::content_hash(&model::to_bytes(&ModelFile { net: net.clone(), config_hash: cfg.hash() }));
            (net, h)
        }
    };
    let images = match images_dir {
        Some(d) => load_eval_images(d)?,
        None => heldout_images(cfg),
    };
    if images.is_empty() {
        return Err(CliError::NoData("no evaluation images".into()));
    }
    let rows = sweep(cfg, &t, param, values, &images)?;
    write_sweep(out, &rows)?;
    Ok(manifest_line("sweep", &cfg.hash(), Some(cfg.train.seed), &hash))
}

/// Runs `cadyq synth`: writes `count` synthetic PNGs into `dir`.
pub fn run_synth(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if count == 0 || size < 8 {
        return Err(CliError::Config(format!("synth needs count >= 1 and size >= 8 (got {count}, {size})")));
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::with_capacity(count);
    for (i, img) in synthetic_set(seed, count, size, size).iter().enumerate() {
        let p = dir.join(format!("synth_{i:03}.png"));
        save_png(&p, img)?;
        out.push(p);
    }
    Ok(out)
}
