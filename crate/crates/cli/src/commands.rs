use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};
use vesselmae::evaluation::{
    evaluate, infer_cases, permutation_test, read_predictions, truths, write_predictions, CasePredictions, CaseTruth,
    EvalReport,
};
use vesselmae::geometry::signed_distance_map;
use vesselmae::model::{checkpoint, Detector, MaeModel};
use vesselmae::sampling::MaskingParams;
use vesselmae::synthvasc::{generate_case, write_case, write_distance_map, write_manifest};
use vesselmae::training::{detector_from_pretrained, finetune, pretrain, CaseSet, FinetuneReport, PretrainReport};

use crate::config::ExperimentConfig;
use crate::svg::froc_svg;

pub const CONFIG_ECHO: &str = "config.toml";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const DETECTOR_CKPT: &str = "detector.ckpt";
pub const PREDICTIONS: &str = "predictions.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_file(&dir.join(CONFIG_ECHO), cfg.to_toml())
}

/// JSON with a trailing newline, prefixed by the resolved configuration.
fn write_json<T: Serialize>(path: &Path, cfg: &ExperimentConfig, body: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        config: &'a ExperimentConfig,
        #[serde(flatten)]
        body: &'a T,
    }
    let mut text = serde_json::to_string_pretty(&Doc { config: cfg, body })?;
    text.push('\n');
    write_file(path, text)
}

fn log_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Digest over the files of every case in a manifest.
pub fn dataset_sha256(manifest: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for dir in vesselmae::synthvasc::read_manifest(manifest)? {
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for f in names {
            h.update(f.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        }
    }
    Ok(hex(&h.finalize()))
}

pub fn train_manifest(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.data_dir.join("train.txt")
}

pub fn test_manifest(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.data_dir.join("test.txt")
}

fn open_set(manifest: &Path) -> Result<CaseSet> {
    let set = CaseSet::from_manifest(manifest).with_context(|| format!("opening dataset {}", manifest.display()))?;
    ensure!(!set.is_empty(), "dataset {} lists no cases", manifest.display());
    Ok(set)
}

/// Generates `n_cases` phantoms with distance maps; the last `cfg.n_test`
/// form the evaluation split.
pub fn synth(cfg: &ExperimentConfig, n_cases: usize, out: &Path, force: bool) -> Result<()> {
    ensure!(n_cases > 0, "n_cases must be positive");
    ensure!(
        cfg.n_test < n_cases,
        "n_test ({}) must be smaller than n_cases ({n_cases})",
        cfg.n_test
    );
    if out.exists() {
        if !force {
            bail!("{} already exists; pass --force to overwrite", out.display());
        }
        for e in fs::read_dir(out)? {
            let p = e?.path();
            if p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("case_")) {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    create_dir(out)?;
    let mut entries = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let case = generate_case(&cfg.phantom, i as u64)?;
        let rel = PathBuf::from(&case.case_id);
        let dir = out.join(&rel);
        write_case(&case, &dir)?;
        write_distance_map(&signed_distance_map(&case.artery_mask, case.spacing_mm), &dir)?;
        info!("wrote {} ({} lesions)", dir.display(), case.lesions.len());
        entries.push(rel);
    }
    let n_train = n_cases - cfg.n_test;
    write_manifest(&out.join("manifest.txt"), &entries)?;
    write_manifest(&out.join("train.txt"), &entries[..n_train])?;
    write_manifest(&out.join("test.txt"), &entries[n_train..])?;
    echo_config(out, cfg)
}

#[derive(Serialize)]
struct PretrainDoc<'a> {
    checkpoint: &'a str,
    train_sha256: String,
    report: &'a PretrainReport,
}

pub fn run_pretrain(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    echo_config(out, cfg)?;
    let set = open_set(data)?;
    let mut model = MaeModel::<f32>::new(&cfg.model, cfg.seed)?;
    let mut log = log_file(&out.join("pretrain_log.csv"))?;
    let report = pretrain(&mut model, &set, &cfg.pretrain, &mut log)?;
    log.flush()?;
    let ckpt = out.join(PRETRAIN_CKPT);
    checkpoint::save(&ckpt, "mae", &cfg.model, &model)?;
    write_json(
        &out.join("pretrain_report.json"),
        cfg,
        &PretrainDoc {
            checkpoint: PRETRAIN_CKPT,
            train_sha256: dataset_sha256(data)?,
            report: &report,
        },
    )?;
    Ok(ckpt)
}

#[derive(Serialize)]
struct FinetuneDoc<'a> {
    checkpoint: &'a str,
    pretrained: Option<String>,
    train_sha256: String,
    report: &'a FinetuneReport,
}

pub fn run_finetune(cfg: &ExperimentConfig, data: &Path, pretrained: Option<&Path>, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    echo_config(out, cfg)?;
    let set = open_set(data)?;
    let mut model = match pretrained {
        Some(p) => detector_from_pretrained(&cfg.model, cfg.seed, p)?,
        None => Detector::<f32>::new(&cfg.model, cfg.seed)?,
    };
    let mut log = log_file(&out.join("finetune_log.csv"))?;
    let report = finetune(&mut model, &set, &cfg.finetune, &mut log)?;
    log.flush()?;
    let ckpt = out.join(DETECTOR_CKPT);
    checkpoint::save(&ckpt, "detector", &cfg.model, &model)?;
    write_json(
        &out.join("finetune_report.json"),
        cfg,
        &FinetuneDoc {
            checkpoint: DETECTOR_CKPT,
            pretrained: pretrained.map(sha256_file).transpose()?,
            train_sha256: dataset_sha256(data)?,
            report: &report,
        },
    )?;
    Ok(ckpt)
}

pub fn load_detector(cfg: &ExperimentConfig, ckpt: &Path) -> Result<Detector<f32>> {
    let ck = checkpoint::load(ckpt)?;
    ensure!(
        ck.header.kind == "detector",
        "{} holds a {} checkpoint, expected a detector",
        ckpt.display(),
        ck.header.kind
    );
    let mut det = Detector::<f32>::new(&cfg.model, cfg.seed)?;
    ck.restore_from(ckpt, &cfg.model, &mut det, "")?;
    Ok(det)
}

pub fn run_infer(cfg: &ExperimentConfig, data: &Path, ckpt: &Path, out: &Path, workers: usize) -> Result<Vec<CasePredictions>> {
    create_dir(out)?;
    echo_config(out, cfg)?;
    let model = load_detector(cfg, ckpt)?;
    let set = open_set(data)?;
    let preds = infer_cases(&model, &set, &cfg.eval.infer, workers)?;
    write_predictions(&out.join(PREDICTIONS), &preds)?;
    Ok(preds)
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub p_value: f64,
}

#[derive(Serialize)]
struct SetDoc<'a> {
    label: &'a str,
    predictions_sha256: &'a str,
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct EvalDoc<'a> {
    eval_sha256: String,
    sets: Vec<SetDoc<'a>>,
    comparisons: &'a [Comparison],
}

/// Labels default to the predictions' parent directory names, made unique.
pub fn default_labels(paths: &[PathBuf]) -> Vec<String> {
    let raw: Vec<String> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| format!("set{i}"))
        })
        .collect();
    raw.iter()
        .enumerate()
        .map(|(i, l)| if raw.iter().filter(|m| *m == l).count() > 1 { format!("{l}_{i}") } else { l.clone() })
        .collect()
}

pub fn pairwise(labels: &[String], reports: &[EvalReport], n_perm: usize, seed: u64) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            out.push(Comparison {
                a: labels[i].clone(),
                b: labels[j].clone(),
                p_value: permutation_test(&reports[i].lesion_hits, &reports[j].lesion_hits, n_perm, seed)?,
            });
        }
    }
    Ok(out)
}

/// Writes metrics JSON/CSV, one FROC CSV per set and the FROC plot.
fn write_eval_outputs(
    cfg: &ExperimentConfig,
    out: &Path,
    eval_sha256: String,
    labels: &[String],
    digests: &[String],
    reports: &[EvalReport],
    comparisons: &[Comparison],
) -> Result<()> {
    let sets = labels
        .iter()
        .zip(digests)
        .zip(reports)
        .map(|((label, d), report)| SetDoc {
            label,
            predictions_sha256: d,
            report,
        })
        .collect();
    write_json(
        &out.join("metrics.json"),
        cfg,
        &EvalDoc {
            eval_sha256,
            sets,
            comparisons,
        },
    )?;
    let mut csv = String::from("label,metric,value\n");
    for (label, r) in labels.iter().zip(reports) {
        for line in r.to_csv().lines().skip(1) {
            csv.push_str(&format!("{label},{line}\n"));
        }
    }
    for c in comparisons {
        csv.push_str(&format!("{}|{},p_value,{}\n", c.a, c.b, c.p_value));
    }
    write_file(&out.join("metrics.csv"), csv)?;
    for (label, r) in labels.iter().zip(reports) {
        write_file(&out.join(format!("froc_{label}.csv")), r.froc.to_csv())?;
    }
    let curves: Vec<(&str, &vesselmae::evaluation::FrocCurve)> =
        labels.iter().zip(reports).map(|(l, r)| (l.as_str(), &r.froc)).collect();
    write_file(&out.join("froc.svg"), froc_svg(&curves))
}

pub fn run_eval(cfg: &ExperimentConfig, data: &Path, predictions: &[PathBuf], labels: &[String], out: &Path) -> Result<Vec<EvalReport>> {
    ensure!(!predictions.is_empty(), "at least one predictions file is required");
    let labels = if labels.is_empty() { default_labels(predictions) } else { labels.to_vec() };
    ensure!(
        labels.len() == predictions.len(),
        "{} labels given for {} prediction sets",
        labels.len(),
        predictions.len()
    );
    create_dir(out)?;
    echo_config(out, cfg)?;
    let truth = truths(&open_set(data)?)?;
    let mut reports = Vec::new();
    let mut digests = Vec::new();
    for p in predictions {
        let preds = read_predictions(p).with_context(|| format!("reading predictions {}", p.display()))?;
        reports.push(evaluate(&preds, &truth, &cfg.eval).with_context(|| format!("evaluating {}", p.display()))?);
        digests.push(sha256_file(p)?);
    }
    let comparisons = pairwise(&labels, &reports, cfg.eval.n_perm, cfg.seed)?;
    write_eval_outputs(cfg, out, dataset_sha256(data)?, &labels, &digests, &reports, &comparisons)?;
    Ok(reports)
}

/// Pre-training switches of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub biased_masking: bool,
    pub biased_sampling: bool,
    pub reconstruct_distance: bool,
    pub pretrained: bool,
}

pub const VARIANTS: [Variant; 5] = [
    Variant {
        name: "A",
        biased_masking: true,
        biased_sampling: true,
        reconstruct_distance: true,
        pretrained: true,
    },
    Variant {
        name: "D",
        biased_masking: true,
        biased_sampling: true,
        reconstruct_distance: false,
        pretrained: true,
    },
    Variant {
        name: "E",
        biased_masking: true,
        biased_sampling: false,
        reconstruct_distance: false,
        pretrained: true,
    },
    Variant {
        name: "F",
        biased_masking: false,
        biased_sampling: false,
        reconstruct_distance: false,
        pretrained: true,
    },
    Variant {
        name: "G",
        biased_masking: false,
        biased_sampling: false,
        reconstruct_distance: false,
        pretrained: false,
    },
];

/// Resolves names to variants in the fixed report order.
pub fn select_variants(names: &[String]) -> Result<Vec<Variant>> {
    for n in names {
        ensure!(
            VARIANTS.iter().any(|v| v.name == n),
            "unknown ablation variant {n:?}; expected one of A, D, E, F, G"
        );
    }
    Ok(VARIANTS.iter().filter(|v| names.iter().any(|n| n == v.name)).copied().collect())
}

pub fn variant_config(cfg: &ExperimentConfig, v: &Variant) -> ExperimentConfig {
    let mut c = cfg.clone();
    if !v.biased_masking {
        c.pretrain.masking = MaskingParams {
            top_k: false,
            ..MaskingParams::uniform()
        };
        c.pretrain.masking.ratio = cfg.pretrain.masking.ratio;
    }
    c.pretrain.biased_sampling = v.biased_sampling;
    c.pretrain.reconstruct_distance = v.reconstruct_distance;
    c
}

#[derive(Serialize)]
struct VariantRow<'a> {
    #[serde(flatten)]
    variant: &'a Variant,
    se_at_budget: f64,
    threshold: Option<f64>,
    p_value_vs_first: Option<f64>,
    eval_sha256: &'a str,
}

#[derive(Serialize)]
struct AblationDoc<'a> {
    reduced: bool,
    eval_sha256: &'a str,
    variants: Vec<VariantRow<'a>>,
    comparisons: &'a [Comparison],
}

pub fn run_ablate(cfg: &ExperimentConfig, out: &Path, reduced: bool, workers: usize) -> Result<Vec<(Variant, EvalReport)>> {
    let names = if reduced {
        warn!(
            "reduced compute budget: running only variants {:?}",
            cfg.ablation.reduced_variants
        );
        &cfg.ablation.reduced_variants
    } else {
        &cfg.ablation.variants
    };
    let variants = select_variants(names)?;
    ensure!(!variants.is_empty(), "no ablation variants selected");
    create_dir(out)?;
    echo_config(out, cfg)?;
    let train = train_manifest(cfg);
    let test = test_manifest(cfg);
    let truth: Vec<CaseTruth> = truths(&open_set(&test)?)?;
    let mut results = Vec::new();
    let mut eval_digests = Vec::new();
    for v in &variants {
        let vcfg = variant_config(cfg, v);
        let dir = out.join(v.name);
        info!("ablation variant {}", v.name);
        let pre = if v.pretrained {
            Some(run_pretrain(&vcfg, &train, &dir.join("pretrain"))?)
        } else {
            None
        };
        let ckpt = run_finetune(&vcfg, &train, pre.as_deref(), &dir.join("finetune"))?;
        let preds = run_infer(&vcfg, &test, &ckpt, &dir.join("infer"), workers)?;
        // hash the evaluation set afresh for each variant as a fairness guard
        eval_digests.push(dataset_sha256(&test)?);
        let report = evaluate(&preds, &truth, &vcfg.eval)?;
        results.push((*v, report));
    }
    if eval_digests.windows(2).any(|w| w[0] != w[1]) {
        return Err(anyhow!("evaluation set changed between ablation variants"));
    }
    let labels: Vec<String> = variants.iter().map(|v| v.name.to_string()).collect();
    let reports: Vec<EvalReport> = results.iter().map(|(_, r)| r.clone()).collect();
    let comparisons = pairwise(&labels, &reports, cfg.eval.n_perm, cfg.seed)?;
    let digests: Vec<String> = variants
        .iter()
        .map(|v| sha256_file(&out.join(v.name).join("infer").join(PREDICTIONS)))
        .collect::<Result<_>>()?;
    let eval_sha = eval_digests[0].clone();
    write_eval_outputs(cfg, out, eval_sha.clone(), &labels, &digests, &reports, &comparisons)?;

    let rows: Vec<VariantRow> = results
        .iter()
        .enumerate()
        .map(|(i, (v, r))| VariantRow {
            variant: v,
            se_at_budget: r.se_at_budget,
            threshold: r.threshold,
            p_value_vs_first: (i > 0).then(|| comparisons[i - 1].p_value),
            eval_sha256: &eval_digests[i],
        })
        .collect();
    let mut csv = String::from("variant,masking,sampling,reconstruction,pretrained,se_at_budget,p_value_vs_first\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant.name,
            r.variant.biased_masking,
            r.variant.biased_sampling,
            r.variant.reconstruct_distance,
            r.variant.pretrained,
            r.se_at_budget,
            r.p_value_vs_first.map_or_else(String::new, |p| p.to_string())
        ));
    }
    write_file(&out.join("ablation.csv"), csv)?;
    write_json(
        &out.join("ablation.json"),
        cfg,
        &AblationDoc {
            reduced,
            eval_sha256: &eval_sha,
            variants: rows,
            comparisons: &comparisons,
        },
    )?;
    Ok(results)
}
