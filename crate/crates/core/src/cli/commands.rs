//! The subcommands. Each reads and writes files under the output directory
//! and returns what it measured.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use crate::data::{
    feature_matrix, load_features, sample_episode, synth_generate, write_features, FeatureRecord,
    Protocol,
};
use crate::error::{GtlError, Result};
use crate::eval::{aggregate_episodes, csv_row, top1_accuracy, EpisodeSummary, EvalResult, CSV_HEADER};
use crate::model::{
    encode, estimate_disturbance, gradient_suite, load_checkpoint, save_checkpoint, GtlParams,
    SuiteOptions,
};
use crate::numerics::{GradCheckReport, Matrix, Mode, SeededRng};
use crate::training::{adapt_phase2, predict, train_phase1, PhaseReport};

const PHASE1_TAG: u64 = 1;
const EPISODE_TAG: u64 = 1 << 40;
const GRADCHECK_TAG: u64 = 2;

pub const BASE_FILE: &str = "base.gtlf";
pub const NOVEL_FILE: &str = "novel.gtlf";
pub const PHASE1_CHECKPOINT: &str = "phase1.ckpt";
pub const ADAPTED_CHECKPOINT: &str = "adapted.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SWEEP_CSV: &str = "sweep_d.csv";

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn resolve(explicit: &Option<PathBuf>, out: &Path, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join(default))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    synth: &'a crate::data::SynthConfig,
    base_records: usize,
    novel_records: usize,
    base_labels: Vec<u32>,
    novel_labels: Vec<u32>,
}

/// Writes the synthetic base/novel features, their ground-truth latents and
/// a manifest recording the generator settings.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    ensure_dir(out)?;
    let (split, latents) = synth_generate(&cfg.synth)?;
    write_features(&out.join(BASE_FILE), &split.base)?;
    write_features(&out.join(NOVEL_FILE), &split.novel)?;
    write_features(&out.join("base_latents.gtlf"), &latents.base)?;
    write_features(&out.join("novel_latents.gtlf"), &latents.novel)?;
    let manifest = SynthManifest {
        synth: &cfg.synth,
        base_records: split.base.len(),
        novel_records: split.novel.len(),
        base_labels: split.base_labels.iter().copied().collect(),
        novel_labels: split.novel_labels.iter().copied().collect(),
    };
    write_text(&out.join("synth_manifest.json"), &to_json(&manifest)?)?;
    Ok((split.base.len(), split.novel.len()))
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    phase: &'a str,
    mode: String,
    wall_clock_secs: f64,
    checksum: String,
    generator_checksum: String,
    final_loss_total: Option<f64>,
    final_loss_ce: Option<f64>,
}

fn write_report(out: &Path, phase: &str, params: &GtlParams, rep: &PhaseReport, cfg: &RunConfig) -> Result<()> {
    write_text(&out.join(format!("{phase}.jsonl")), &rep.representation_jsonl())?;
    write_text(&out.join(format!("{phase}_classifier.jsonl")), &rep.classifier_jsonl())?;
    let summary = ReportSummary {
        phase,
        mode: cfg.train.mode.to_string(),
        wall_clock_secs: rep.wall_clock_secs,
        checksum: format!("{:016x}", rep.checksum),
        generator_checksum: format!("{:016x}", params.generator.checksum()),
        final_loss_total: rep.representation.last().map(|r| r.loss_total),
        final_loss_ce: rep.classifier.last().map(|r| r.loss_total),
    };
    write_text(&out.join(format!("{phase}_report.json")), &to_json(&summary)?)
}

/// Phase 1 on the base features; writes the checkpoint and loss curves.
pub fn cmd_train_base(cfg: &RunConfig, out: &Path) -> Result<(GtlParams, PhaseReport)> {
    ensure_dir(out)?;
    let base = load_features(&resolve(&cfg.paths.base, out, BASE_FILE))?;
    let rng = SeededRng::new(cfg.train.seed).derive(PHASE1_TAG);
    let (params, rep) = train_phase1(&base, &cfg.train, &rng)?;
    save_checkpoint(&params, &out.join(PHASE1_CHECKPOINT))?;
    write_report(out, "phase1", &params, &rep, cfg)?;
    Ok((params, rep))
}

fn load_phase1(cfg: &RunConfig, out: &Path) -> Result<GtlParams> {
    let params = load_checkpoint(&resolve(&cfg.paths.checkpoint, out, PHASE1_CHECKPOINT))?;
    cfg.train.dims.check_compatible(&params.dims)?;
    Ok(params)
}

fn episode_rng(seed: u64, shots: usize, episode: usize) -> SeededRng {
    SeededRng::new(seed).derive(EPISODE_TAG + ((shots as u64) << 24) + episode as u64)
}

fn collect(records: &[FeatureRecord], idx: &[usize]) -> Vec<FeatureRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// One adapt-and-predict cycle on a sampled episode.
fn run_episode(
    params: &GtlParams,
    novel: &[FeatureRecord],
    cfg: &RunConfig,
    protocol: Protocol,
    shots: usize,
    episode: usize,
) -> Result<(GtlParams, PhaseReport, EvalResult)> {
    let mut rng = episode_rng(cfg.train.seed, shots, episode);
    let ep = sample_episode(novel, protocol, shots, &mut rng)?;
    let support = collect(novel, &ep.support);
    let (adapted, rep) = adapt_phase2(params, &support, &cfg.train, &rng.derive(1))?;
    // every selected class keeps at least one query record
    let query = collect(novel, &ep.query);
    let x = feature_matrix(&query)?;
    let preds = predict(&adapted, &x, cfg.train.mode.ablation())?;
    let labels: Vec<u32> = query.iter().map(|r| r.label).collect();
    let mods: Vec<u8> = query.iter().map(|r| r.modality).collect();
    let result = top1_accuracy(&preds, &labels, &mods)?;
    Ok((adapted, rep, result))
}

/// Writes `<prefix>_mu_c.gtlf` and `<prefix>_u_hat.gtlf`: the posterior
/// mean of `z_c` and the disturbance estimate for every record.
pub fn dump_latents(params: &GtlParams, records: &[FeatureRecord], out: &Path, prefix: &str) -> Result<()> {
    let x = feature_matrix(records)?;
    let enc = encode(params, &x, Mode::Eval, 0.0, &mut SeededRng::new(0))?;
    let mu_c = enc.mu.slice_cols(0, params.dims.concept);
    let u_hat = estimate_disturbance(params, &enc.hidden)?.u_hat;
    let as_records = |m: &Matrix| -> Vec<FeatureRecord> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| FeatureRecord {
                id: r.id,
                feature: m.row(i).iter().map(|&v| v as f32).collect(),
                label: r.label,
                modality: r.modality,
            })
            .collect()
    };
    write_features(&out.join(format!("{prefix}_mu_c.gtlf")), &as_records(&mu_c))?;
    write_features(&out.join(format!("{prefix}_u_hat.gtlf")), &as_records(&u_hat))?;
    Ok(())
}

/// Phase 2 on the first episode of the first shot setting; writes the
/// adapted checkpoint and its loss curves.
pub fn cmd_adapt(cfg: &RunConfig, out: &Path, dump: bool) -> Result<(GtlParams, EvalResult)> {
    ensure_dir(out)?;
    let params = load_phase1(cfg, out)?;
    let novel = load_features(&resolve(&cfg.paths.novel, out, NOVEL_FILE))?;
    let shots = cfg.eval.shots[0];
    let (adapted, rep, result) = run_episode(&params, &novel, cfg, cfg.eval.protocol()?, shots, 0)?;
    save_checkpoint(&adapted, &out.join(ADAPTED_CHECKPOINT))?;
    write_report(out, "phase2", &adapted, &rep, cfg)?;
    if dump {
        dump_latents(&adapted, &novel, out, "novel")?;
    }
    Ok((adapted, result))
}

fn evaluate(params: &GtlParams, novel: &[FeatureRecord], cfg: &RunConfig) -> Result<Vec<(usize, EpisodeSummary)>> {
    let protocol = cfg.eval.protocol()?;
    let mut rows = Vec::new();
    for &shots in &cfg.eval.shots {
        let results: Vec<EvalResult> = (0..cfg.eval.episodes)
            .into_par_iter()
            .map(|e| run_episode(params, novel, cfg, protocol, shots, e).map(|(_, _, r)| r))
            .collect::<Result<_>>()?;
        rows.push((shots, aggregate_episodes(&results)?));
    }
    Ok(rows)
}

fn setting(cfg: &RunConfig) -> Result<String> {
    Ok(format!("{}/{}", cfg.train.mode, cfg.eval.protocol()?))
}

/// Phase 2 and evaluation over `eval.episodes` sampled episodes for every
/// shot count. Writes `metrics.csv` and `metrics.json` and returns the
/// summaries with the CSV text.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, dump: bool) -> Result<(Vec<(usize, EpisodeSummary)>, String)> {
    ensure_dir(out)?;
    let params = load_phase1(cfg, out)?;
    let novel = load_features(&resolve(&cfg.paths.novel, out, NOVEL_FILE))?;
    let rows = evaluate(&params, &novel, cfg)?;
    let name = setting(cfg)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for (k, s) in &rows {
        csv.push_str(&csv_row(&name, *k, s));
        csv.push('\n');
    }
    write_text(&out.join(METRICS_CSV), &csv)?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|(k, s)| serde_json::json!({ "setting": name, "k": k, "summary": s }))
        .collect();
    write_text(&out.join("metrics.json"), &to_json(&json)?)?;
    if dump {
        dump_latents(&params, &novel, out, "phase1_novel")?;
    }
    Ok((rows, csv))
}

/// Phase 1 and evaluation for every latent-domain count in `domains`.
pub fn cmd_sweep_d(cfg: &RunConfig, out: &Path, domains: &[usize]) -> Result<String> {
    if domains.is_empty() {
        return Err(GtlError::Validation("sweep-d needs at least one domain count".into()));
    }
    ensure_dir(out)?;
    let base = load_features(&resolve(&cfg.paths.base, out, BASE_FILE))?;
    let novel = load_features(&resolve(&cfg.paths.novel, out, NOVEL_FILE))?;
    let name = setting(cfg)?;
    let mut csv = format!("d,{CSV_HEADER}\n");
    for &d in domains {
        let mut c = cfg.clone();
        c.train.dims.domains = d;
        c.train.validate()?;
        let rng = SeededRng::new(c.train.seed).derive(PHASE1_TAG);
        let (params, _) = train_phase1(&base, &c.train, &rng)?;
        for (k, s) in evaluate(&params, &novel, &c)? {
            csv.push_str(&format!("{d},{}\n", csv_row(&name, k, &s)));
        }
    }
    write_text(&out.join(SWEEP_CSV), &csv)?;
    Ok(csv)
}

/// Options of [`cmd_gradcheck`].
#[derive(Clone, Debug, Default)]
pub struct GradcheckArgs {
    pub batch: usize,
    pub freeze_generator: bool,
    /// Negative control: perturb the analytic gradient of this tensor.
    pub corrupt: Option<String>,
}

/// Finite-difference check of the whole model at `train.dims`.
pub fn cmd_gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<GradCheckReport> {
    if args.batch < 2 {
        return Err(GtlError::Validation("gradcheck batch must be at least 2".into()));
    }
    let mut rng = SeededRng::new(cfg.train.seed).derive(GRADCHECK_TAG);
    let dims = cfg.train.dims;
    let ablation = cfg.train.mode.ablation();
    let cls_input = match ablation {
        crate::model::Ablation::NoZ => dims.input,
        _ => dims.concept,
    };
    let mut params = GtlParams::init_with_classifier_input(dims, cls_input, &mut rng)?;
    params.generator.frozen = args.freeze_generator;
    let x = Matrix::from_vec(
        args.batch,
        dims.input,
        (0..args.batch * dims.input).map(|_| rng.normal()).collect(),
    )?;
    let labels: Vec<usize> = (0..args.batch).map(|_| rng.below(dims.classes)).collect();
    let opts = SuiteOptions {
        lambda: cfg.train.lambda,
        ablation,
        seed: cfg.train.seed,
        corrupt: args.corrupt.clone(),
        ..Default::default()
    };
    let report = gradient_suite(&params, &x, &labels, &opts)?;
    for (name, err) in &report.per_param {
        log::debug!("{name}: {err:.3e}");
    }
    Ok(report)
}
