use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pta_core::data::{
    degrade_to_lowfield, generate_phantom_volume, write_preview_png, SliceDataset, Volume,
};
use pta_core::losses::{loss_csv_string, LossReport};
use pta_core::metrics::{evaluate, FeatureExtractor, Pairing};
use pta_core::nets::{Checkpoint, Stage};
use pta_core::selftest::{run_selftest, Fault};
use pta_core::training::{
    load_encoder, load_pretext, pretrain_lsc, pretrain_sgp, stage_checkpoint, synthesize, train_pta, PtaOptions,
    SliceSource, TrainError,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{output_dir, RunConfig, RESOLVED_CONFIG_FILE};
use crate::failure::{io_failure, Failure};

pub const PAIRING_FILE: &str = "pairing.json";
pub const LOSS_CSV: &str = "losses.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// Slice keys shared by the paired HF and LF phantom sets. Only evaluation
/// reads this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingManifest {
    pub hf_sha256: String,
    pub lf_sha256: String,
    pub pairs: Vec<PairKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairKey {
    pub volume_id: String,
    pub slice_index: usize,
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = output_dir(out);
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    write_file(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_json())?;
    Ok(dir)
}

fn pick<'a>(flag: &'a Option<PathBuf>, cfg: &'a Option<PathBuf>) -> Option<&'a Path> {
    flag.as_deref().or(cfg.as_deref())
}

fn require<'a>(p: Option<&'a Path>, what: &str) -> Result<&'a Path, Failure> {
    p.ok_or_else(|| Failure::config(format!("{what} is required (flag or config paths)")))
}

fn load_dataset(dir: &Path, what: &str) -> Result<SliceDataset, Failure> {
    SliceDataset::load(dir).map_err(|e| Failure::from(e).context(what))
}

pub fn phantom(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let dir = prepare_out(out, cfg)?;
    let pc = &cfg.phantom;
    let hf: Vec<Volume> = (0..pc.num_volumes as u64)
        .map(|v| generate_phantom_volume(pc, v))
        .collect::<Result<_, _>>()?;
    let lf: Vec<Volume> = hf.iter().map(|v| degrade_to_lowfield(v, pc)).collect::<Result<_, _>>()?;
    let hf = SliceDataset::from_volumes(&hf, pc.seed)?;
    let lf = SliceDataset::from_volumes(&lf, pc.seed)?;
    let hf_sha = hf.save(&dir.join("hf"))?;
    let lf_sha = lf.save(&dir.join("lf"))?;
    let pairs = hf
        .slices
        .iter()
        .map(|s| PairKey {
            volume_id: s.volume_id.clone(),
            slice_index: s.slice_index,
        })
        .collect();
    let manifest = PairingManifest {
        hf_sha256: hf_sha.clone(),
        lf_sha256: lf_sha.clone(),
        pairs,
    };
    write_file(
        &dir.join(PAIRING_FILE),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    println!(
        "wrote {} HF and {} LF slices ({} volumes x {} slices, {}x{}) to {}",
        hf.len(),
        lf.len(),
        pc.num_volumes,
        pc.slices_per_volume,
        pc.image_size,
        pc.image_size,
        dir.display()
    );
    println!("hf manifest sha256 {hf_sha}\nlf manifest sha256 {lf_sha}");
    Ok(())
}

pub struct TrainInputs {
    pub hf: Option<PathBuf>,
    pub lf: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub pretext: Option<PathBuf>,
}

fn progress(stage: Stage, total: u64) -> impl FnMut(u64, &LossReport) {
    let every = (total / 10).max(1);
    move |step, r| {
        if (step + 1) % every == 0 || step + 1 == total {
            let values: Vec<String> = r.values().map(|(k, v)| format!("{k}={v:.4}")).collect();
            eprintln!("[{stage:?}] step {}/{total} {}", step + 1, values.join(" "));
        }
    }
}

fn save_intermediate(dir: &Path, every: u64, step: u64, ckpt: impl FnOnce() -> Checkpoint) -> Result<(), TrainError> {
    if every > 0 && (step + 1).is_multiple_of(every) {
        ckpt().save(&dir.join("checkpoints").join(format!("step_{:06}.ckpt", step + 1)))?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, stage: Stage, inputs: &TrainInputs, out: &Path) -> Result<(), Failure> {
    let mut cfg = cfg.clone();
    cfg.train.stage = stage;
    cfg.validate()?;
    let paths = &cfg.paths;
    let hf_dir = require(pick(&inputs.hf, &paths.hf), "--hf")?;
    let lf_dir = pick(&inputs.lf, &paths.lf);
    let encoder_path = pick(&inputs.encoder, &paths.encoder);
    let pretext_path = pick(&inputs.pretext, &paths.pretext);
    if stage == Stage::Pta {
        if cfg.train.ablation.use_sgp && encoder_path.is_none() {
            return Err(Failure::config(
                "train.ablation.use_sgp is on but no encoder checkpoint was given (--encoder); \
                 run `train --stage sgp` first or set train.ablation.use_sgp=false",
            ));
        }
        if cfg.train.ablation.use_lsc && pretext_path.is_none() {
            return Err(Failure::config(
                "train.ablation.use_lsc is on but no pretext checkpoint was given (--pretext); \
                 run `train --stage lsc` first or set train.ablation.use_lsc=false",
            ));
        }
    }
    let lf_dir = match stage {
        Stage::Lsc => None,
        _ => Some(require(lf_dir, "--lf")?),
    };

    let hf = load_dataset(hf_dir, "HF dataset")?;
    let lf = lf_dir.map(|d| load_dataset(d, "LF dataset")).transpose()?;
    let encoder = match (stage, cfg.train.ablation.use_sgp, encoder_path) {
        (Stage::Pta, true, Some(p)) => Some(load_encoder(&Checkpoint::load(p)?)?),
        _ => None,
    };
    let pretext = match (stage, cfg.train.ablation.use_lsc, pretext_path) {
        (Stage::Pta, true, Some(p)) => Some(load_pretext(&Checkpoint::load(p)?)?),
        _ => None,
    };

    let dir = prepare_out(out, &cfg)?;
    let (h, w) = hf.dims();
    let tc = &cfg.train;
    let every = tc.checkpoint_every;
    let mut log = progress(stage, tc.iterations);
    let started = Instant::now();
    let (ckpt, history, name) = match stage {
        Stage::Sgp => {
            let lf = lf.as_ref().expect("LF loaded for sgp");
            let (net, hist) = pretrain_sgp(lf, &hf, tc, &mut |step, net, r| {
                log(step, r);
                save_intermediate(&dir, every, step, || stage_checkpoint(net, tc, h, w))
            })?;
            (stage_checkpoint(&net, tc, h, w), hist, "encoder.ckpt")
        }
        Stage::Lsc => {
            let (net, hist) = pretrain_lsc(&hf, tc, &mut |step, net, r| {
                log(step, r);
                save_intermediate(&dir, every, step, || stage_checkpoint(net, tc, h, w))
            })?;
            (stage_checkpoint(&net, tc, h, w), hist, "pretext.ckpt")
        }
        Stage::Pta => {
            let lf = lf.as_ref().expect("LF loaded for pta");
            let (models, hist) = train_pta(
                lf,
                &hf,
                encoder.as_ref(),
                pretext.as_ref(),
                tc,
                &PtaOptions::default(),
                &mut |step, m, r| {
                    log(step, r);
                    save_intermediate(&dir, every, step, || m.checkpoint(&tc.network, h, w))
                },
            )?;
            let mut c = models.checkpoint(&tc.network, h, w);
            c.extra = serde_json::to_value(tc).expect("config serializes");
            (c, hist, "pta.ckpt")
        }
        Stage::Extractor => return Err(Failure::config("the extractor is trained by `eval`")),
    };
    let wall = started.elapsed().as_secs_f64();
    let ckpt_path = dir.join(name);
    let sha = ckpt.save(&ckpt_path)?;
    let csv = loss_csv_string(&history).map_err(|e| Failure::runtime(e.to_string()))?;
    write_file(&dir.join(LOSS_CSV), &csv)?;
    let summary = json!({
        "stage": stage,
        "config": cfg,
        "checkpoint": { "file": name, "sha256": sha },
        "iterations": history.len(),
        "final": history.last().map(|r| r.values().collect::<std::collections::BTreeMap<_, _>>()),
        "wall_time_s": wall,
    });
    write_file(
        &dir.join(SUMMARY_FILE),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!("{stage:?} done: {} steps in {wall:.1}s", history.len());
    println!("checkpoint {} sha256 {sha}", ckpt_path.display());
    Ok(())
}

pub fn synth(cfg: &RunConfig, checkpoint: &Path, lf: Option<PathBuf>, out: &Path, preview: bool) -> Result<(), Failure> {
    let lf_dir = require(pick(&lf, &cfg.paths.lf), "--lf")?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let lf = load_dataset(lf_dir, "LF dataset")?;
    let y = synthesize(&ckpt, &ckpt.sha256(), &lf)?;
    let dir = prepare_out(out, cfg)?;
    let sha = y.save(&dir)?;
    if preview {
        let pdir = dir.join("previews");
        for s in &y.slices {
            write_preview_png(s, &pdir.join(format!("{}_{:03}.png", s.volume_id, s.slice_index)))?;
        }
    }
    println!(
        "synthesized {} slices into {} (manifest sha256 {sha})",
        y.len(),
        dir.display()
    );
    Ok(())
}

pub struct EvalInputs {
    pub generated: PathBuf,
    pub reference: PathBuf,
    pub paired: bool,
    pub pairing: Option<PathBuf>,
    pub extractor: Option<PathBuf>,
}

fn restricted_pairing(gen: &SliceDataset, reference: &SliceDataset, manifest: &PairingManifest) -> Result<Pairing, Failure> {
    let allowed: BTreeSet<(&str, usize)> = manifest
        .pairs
        .iter()
        .map(|k| (k.volume_id.as_str(), k.slice_index))
        .collect();
    let all = Pairing::by_key(gen, reference)?;
    let pairs: Vec<_> = all
        .pairs
        .into_iter()
        .filter(|&(i, _)| allowed.contains(&(gen.slices[i].volume_id.as_str(), gen.slices[i].slice_index)))
        .collect();
    if pairs.is_empty() {
        return Err(Failure::config("pairing manifest shares no slice with the generated set"));
    }
    Ok(Pairing { pairs })
}

pub fn eval(cfg: &RunConfig, inputs: &EvalInputs, out: &Path) -> Result<(), Failure> {
    let manifest = if inputs.paired {
        let p = pick(&inputs.pairing, &cfg.paths.pairing)
            .ok_or_else(|| Failure::config("--paired needs a pairing manifest (--pairing or paths.pairing)"))?;
        let text = fs::read_to_string(p)
            .map_err(|e| Failure::config(format!("pairing manifest {}: {e}", p.display())))?;
        let m: PairingManifest = serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("pairing manifest {}: {e}", p.display())))?;
        Some(m)
    } else {
        None
    };
    let gen = load_dataset(&inputs.generated, "generated dataset")?;
    let reference = load_dataset(&inputs.reference, "reference dataset")?;
    if gen.dims() != reference.dims() {
        return Err(Failure::config(format!(
            "generated slices are {:?} but reference slices are {:?}",
            gen.dims(),
            reference.dims()
        )));
    }
    let pairing = manifest
        .as_ref()
        .map(|m| restricted_pairing(&gen, &reference, m))
        .transpose()?;
    let dir = prepare_out(out, cfg)?;
    let extractor = match pick(&inputs.extractor, &cfg.paths.extractor) {
        Some(p) => {
            let ex = FeatureExtractor::from_checkpoint(&Checkpoint::load(p)?)?;
            let size = ex.config.phantom.image_size;
            if (size, size) != gen.dims() {
                return Err(Failure::config(format!(
                    "extractor mismatch: {} was trained on {size}x{size} slices, datasets are {:?}",
                    p.display(),
                    gen.dims()
                )));
            }
            ex
        }
        None => {
            let mut ec = cfg.extractor.clone();
            ec.phantom.image_size = gen.dims().0;
            if gen.dims().0 != gen.dims().1 {
                return Err(Failure::config("the bundled extractor recipe needs square slices"));
            }
            eprintln!("training feature extractor ({} iterations)", ec.iterations);
            let (ex, _) = FeatureExtractor::train(ec)?;
            ex.checkpoint().save(&dir.join("extractor.ckpt"))?;
            ex
        }
    };
    let report = evaluate(&extractor, &gen, &reference, pairing.as_ref(), &cfg.eval)?;
    write_file(&dir.join(METRICS_JSON), &report.to_json())?;
    write_file(&dir.join(METRICS_CSV), &report.to_csv()?)?;
    print!("{}", report.table());
    println!(
        "n_generated={} n_reference={} msssim_mode={:?} extractor={}",
        report.n_generated, report.n_reference, report.msssim_mode, report.extractor_id
    );
    Ok(())
}

/// Prints one line per oracle; fails naming every check that did not pass.
pub fn selftest(fault: Option<Fault>) -> Result<(), Failure> {
    let started = Instant::now();
    let results = run_selftest(fault);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!(
        "{} of {} checks passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("failing checks: {}", failed.join(", "))))
    }
}
