//! Experiment protocols over a trained model: clean test evaluation,
//! robustness under corruption at fixed noise levels, evaluation on a
//! distribution-shifted dataset, and the strategy ablation that toggles the
//! loss and the fusion rule. Each protocol returns a serializable report;
//! rendering to aligned text or CSV lives here too so every consumer prints
//! the same tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{self, CorruptKind, Dataset, ScribbleSample, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalConfig, EvalReport};
use crate::net::DualNet;
use crate::rng;
use crate::train::{self, FusionRule, LossKind, RunRecord, TrainConfig};

/// Seed-stream tag for corruption draws; disjoint from the generator's and
/// the trainer's tags.
const SEED_TAG_CORRUPT: u64 = 0x20;

/// Noise levels of the robustness protocol.
pub const ROBUSTNESS_SIGMAS: [f64; 3] = [0.05, 0.10, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Clean,
    Robustness,
    Ood,
    Ablation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Corruption applied by the robustness protocol.
    pub corrupt_kind: CorruptKind,
    /// Corruption levels of the robustness protocol.
    pub sigmas: Vec<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            corrupt_kind: CorruptKind::Noise,
            sigmas: ROBUSTNESS_SIGMAS.to_vec(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        if self.sigmas.is_empty() {
            return Err(Error::InvalidConfig(
                "the robustness protocol needs at least one sigma".into(),
            ));
        }
        for &sigma in &self.sigmas {
            if !sigma.is_finite() || sigma <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "corruption sigma must be positive and finite, got {sigma}"
                )));
            }
        }
        Ok(())
    }
}

/// Train on the train split, evaluate on the in-distribution test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanReport {
    pub run: RunRecord,
    pub test: EvalReport,
}

/// One corruption level's evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaReport {
    pub sigma: f64,
    pub report: EvalReport,
}

/// One model, evaluated clean and under each corruption level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub run: RunRecord,
    pub corrupt_kind: CorruptKind,
    pub clean: EvalReport,
    pub corrupted: Vec<SigmaReport>,
}

/// A model trained in-distribution, evaluated on a shifted dataset's test
/// split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodReport {
    pub run: RunRecord,
    pub test: EvalReport,
}

/// One strategy variant of the ablation: which loss and fusion it ran with
/// and how it scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss: LossKind,
    pub fusion: FusionRule,
    pub best_val_dice: Option<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Any protocol's report, tagged so a report file identifies itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "kebab-case")]
pub enum ProtocolReport {
    Clean(CleanReport),
    Robustness(RobustnessReport),
    Ood(OodReport),
    Ablation(AblationReport),
}

/// Corrupt every sample once, each from its own seed stream, so the copies
/// depend only on (seed, kind, sigma, position).
pub fn corrupted_copies(
    samples: &[&ScribbleSample],
    kind: CorruptKind,
    sigma: f64,
    seed: u64,
) -> Result<Vec<ScribbleSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut stream =
                rng::derive_rng(seed, &[SEED_TAG_CORRUPT, sigma.to_bits(), i as u64]);
            data::corrupt(sample, kind, sigma, &mut stream)
        })
        .collect()
}

/// Corrupt a whole dataset, keeping its manifest (ids, splits, paths)
/// intact; sample streams are keyed by position in the dataset.
pub fn corrupt_dataset(
    dataset: &Dataset,
    kind: CorruptKind,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut position = 0u64;
    dataset.map_samples(|sample| {
        let mut stream =
            rng::derive_rng(seed, &[SEED_TAG_CORRUPT, sigma.to_bits(), position]);
        position += 1;
        data::corrupt(sample, kind, sigma, &mut stream)
    })
}

fn eval_split(net: &DualNet, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let samples = dataset.split(Split::Test);
    if samples.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    metrics::evaluate(net, &samples, cfg)
}

/// Train once, score the in-distribution test split.
pub fn run_clean(cfg: &ProtocolConfig, dataset: &Dataset) -> Result<(DualNet, CleanReport)> {
    cfg.validate()?;
    let (net, run) = train::train(&cfg.train, dataset)?;
    let test = eval_split(&net, dataset, &cfg.eval)?;
    Ok((net, CleanReport { run, test }))
}

/// Train once, score the clean test split and one corrupted copy per sigma.
pub fn run_robustness(
    cfg: &ProtocolConfig,
    dataset: &Dataset,
) -> Result<(DualNet, RobustnessReport)> {
    cfg.validate()?;
    let (net, run) = train::train(&cfg.train, dataset)?;
    let clean = eval_split(&net, dataset, &cfg.eval)?;
    let test = dataset.split(Split::Test);
    let mut corrupted = Vec::with_capacity(cfg.sigmas.len());
    for &sigma in &cfg.sigmas {
        let copies = corrupted_copies(&test, cfg.corrupt_kind, sigma, cfg.train.seed)?;
        let refs: Vec<&ScribbleSample> = copies.iter().collect();
        let report = metrics::evaluate(&net, &refs, &cfg.eval)?;
        corrupted.push(SigmaReport { sigma, report });
    }
    Ok((
        net,
        RobustnessReport {
            run,
            corrupt_kind: cfg.corrupt_kind,
            clean,
            corrupted,
        },
    ))
}

/// Train on the in-distribution dataset, score the shifted dataset's test
/// split. Handing it the training dataset itself reproduces the clean
/// report.
pub fn run_ood(
    cfg: &ProtocolConfig,
    dataset: &Dataset,
    shifted: &Dataset,
) -> Result<(DualNet, OodReport)> {
    cfg.validate()?;
    if shifted.manifest().num_classes != dataset.manifest().num_classes {
        return Err(Error::ConfigMismatch(
            "shifted dataset disagrees with the training dataset on the class count".into(),
        ));
    }
    let (net, run) = train::train(&cfg.train, dataset)?;
    let test = eval_split(&net, shifted, &cfg.eval)?;
    Ok((net, OodReport { run, test }))
}

/// The strategy triple of the ablation, weakest to strongest.
pub const ABLATION_VARIANTS: [(LossKind, FusionRule); 3] = [
    (LossKind::Ce, FusionRule::Mean),
    (LossKind::Edl, FusionRule::Mean),
    (LossKind::Edl, FusionRule::Dempster),
];

/// Train one model per strategy variant, all from the same seed, and score
/// each on the in-distribution test split.
pub fn run_ablation(cfg: &ProtocolConfig, dataset: &Dataset) -> Result<AblationReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for (loss, fusion) in ABLATION_VARIANTS {
        let mut variant = cfg.train.clone();
        variant.loss = loss;
        variant.fusion = fusion;
        let (net, run) = train::train(&variant, dataset)?;
        let report = eval_split(&net, dataset, &cfg.eval)?;
        rows.push(AblationRow {
            loss,
            fusion,
            best_val_dice: run.best_val_dice,
            report,
        });
    }
    Ok(AblationReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Text,
    Csv,
}

fn loss_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::Edl => "edl",
        LossKind::Ce => "ce",
    }
}

fn fusion_name(fusion: FusionRule) -> &'static str {
    match fusion {
        FusionRule::Dempster => "dempster",
        FusionRule::Mean => "mean",
    }
}

/// Render a bare evaluation report (the `evaluate` command's output).
pub fn render_eval(report: &EvalReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Text => push_eval_text(&mut out, report),
        ReportFormat::Csv => push_eval_csv(&mut out, report),
    }
    out
}

fn push_eval_text(out: &mut String, report: &EvalReport) {
    let k = report.per_class_dice.len();
    let _ = writeln!(out, "samples  {}", report.sample_count);
    let mut header = format!("{:<8}{:>10}", "metric", "mean");
    for c in 1..=k {
        let _ = write!(header, "{:>10}", format!("class {c}"));
    }
    let _ = writeln!(out, "{header}");
    let mut dice = format!("{:<8}{:>10.4}", "dice", report.mean_dice);
    let mut assd = format!("{:<8}{:>10.4}", "assd", report.mean_assd);
    for c in 0..k {
        let _ = write!(dice, "{:>10.4}", report.per_class_dice[c]);
        let _ = write!(assd, "{:>10.4}", report.per_class_assd[c]);
    }
    let _ = writeln!(out, "{dice}");
    let _ = writeln!(out, "{assd}");
    let _ = writeln!(out, "{:<8}{:>10.4}", "ece", report.ece);
    let _ = writeln!(out, "{:<8}{:>10.4}", "ueo", report.ueo);
}

fn push_eval_csv(out: &mut String, report: &EvalReport) {
    let k = report.per_class_dice.len();
    let mut header = String::from("metric,mean");
    for c in 1..=k {
        let _ = write!(header, ",class {c}");
    }
    let _ = writeln!(out, "{header}");
    let mut dice = format!("dice,{}", report.mean_dice);
    let mut assd = format!("assd,{}", report.mean_assd);
    let blank = ",".repeat(k);
    for c in 0..k {
        let _ = write!(dice, ",{}", report.per_class_dice[c]);
        let _ = write!(assd, ",{}", report.per_class_assd[c]);
    }
    let _ = writeln!(out, "{dice}");
    let _ = writeln!(out, "{assd}");
    let _ = writeln!(out, "ece,{}{blank}", report.ece);
    let _ = writeln!(out, "ueo,{}{blank}", report.ueo);
}

fn run_summary(out: &mut String, run: &RunRecord) {
    let _ = writeln!(
        out,
        "trained {} epochs in {:.1}s; best val dice {} at epoch {}",
        run.epochs.len(),
        run.seconds,
        run.best_val_dice
            .map(|d| format!("{d:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        run.best_epoch
            .map(|e| e.to_string())
            .unwrap_or_else(|| "n/a".into()),
    );
}

const SUMMARY_COLUMNS: [&str; 4] = ["dice", "assd", "ece", "ueo"];

fn summary_values(report: &EvalReport) -> [f64; 4] {
    [report.mean_dice, report.mean_assd, report.ece, report.ueo]
}

fn summary_table<L: AsRef<str>>(
    out: &mut String,
    label_header: &str,
    rows: &[(L, &EvalReport)],
    format: ReportFormat,
) {
    match format {
        ReportFormat::Text => {
            let mut header = format!("{label_header:<14}");
            for col in SUMMARY_COLUMNS {
                let _ = write!(header, "{col:>10}");
            }
            let _ = writeln!(out, "{header}");
            for (label, report) in rows {
                let mut line = format!("{:<14}", label.as_ref());
                for v in summary_values(report) {
                    let _ = write!(line, "{v:>10.4}");
                }
                let _ = writeln!(out, "{line}");
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "{label_header},{}", SUMMARY_COLUMNS.join(","));
            for (label, report) in rows {
                let mut line = label.as_ref().to_string();
                for v in summary_values(report) {
                    let _ = write!(line, ",{v}");
                }
                let _ = writeln!(out, "{line}");
            }
        }
    }
}

/// Render a protocol report the way the CLI prints it.
pub fn render(report: &ProtocolReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match report {
        ProtocolReport::Clean(clean) => {
            if format == ReportFormat::Text {
                out.push_str("clean protocol\n");
                run_summary(&mut out, &clean.run);
                push_eval_text(&mut out, &clean.test);
            } else {
                push_eval_csv(&mut out, &clean.test);
            }
        }
        ProtocolReport::Ood(ood) => {
            if format == ReportFormat::Text {
                out.push_str("distribution-shift protocol\n");
                run_summary(&mut out, &ood.run);
                push_eval_text(&mut out, &ood.test);
            } else {
                push_eval_csv(&mut out, &ood.test);
            }
        }
        ProtocolReport::Robustness(rob) => {
            if format == ReportFormat::Text {
                let _ = writeln!(
                    &mut out,
                    "robustness protocol ({})",
                    match rob.corrupt_kind {
                        CorruptKind::Noise => "noise",
                        CorruptKind::Blur => "blur",
                    }
                );
                run_summary(&mut out, &rob.run);
            }
            let mut rows: Vec<(String, &EvalReport)> = vec![("clean".into(), &rob.clean)];
            for entry in &rob.corrupted {
                rows.push((format!("{:.3}", entry.sigma), &entry.report));
            }
            summary_table(&mut out, "sigma", &rows, format);
        }
        ProtocolReport::Ablation(ab) => {
            if format == ReportFormat::Text {
                out.push_str("strategy ablation\n");
            }
            let rows: Vec<(String, &EvalReport)> = ab
                .rows
                .iter()
                .map(|row| {
                    (
                        format!("{}+{}", loss_name(row.loss), fusion_name(row.fusion)),
                        &row.report,
                    )
                })
                .collect();
            summary_table(&mut out, "strategy", &rows, format);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::net::NetConfig;

    fn tiny_dataset(ood: bool) -> Dataset {
        generate(&GeneratorConfig {
            n_samples: 8,
            height: 16,
            width: 16,
            ood,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> ProtocolConfig {
        ProtocolConfig {
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                net: NetConfig {
                    base_width: 4,
                    depth: 2,
                    ..NetConfig::default()
                },
                ..TrainConfig::default()
            },
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn robustness_emits_one_report_per_sigma() {
        let dataset = tiny_dataset(false);
        let (_, report) = run_robustness(&tiny_cfg(), &dataset).unwrap();
        assert_eq!(report.corrupted.len(), 3);
        let sigmas: Vec<f64> = report.corrupted.iter().map(|r| r.sigma).collect();
        assert_eq!(sigmas, ROBUSTNESS_SIGMAS.to_vec());
        for entry in &report.corrupted {
            assert!(entry.report.mean_dice.is_finite());
            assert_eq!(entry.report.sample_count, report.clean.sample_count);
        }
    }

    #[test]
    fn shift_protocol_on_the_training_distribution_reproduces_clean() {
        let dataset = tiny_dataset(false);
        let cfg = tiny_cfg();
        let (_, clean) = run_clean(&cfg, &dataset).unwrap();
        let (_, shifted) = run_ood(&cfg, &dataset, &dataset).unwrap();
        assert_eq!(clean.test.mean_dice, shifted.test.mean_dice);
        assert_eq!(clean.test.per_class_assd, shifted.test.per_class_assd);
        assert_eq!(clean.test.ece, shifted.test.ece);
        assert_eq!(clean.test.ueo, shifted.test.ueo);
    }

    #[test]
    fn ablation_runs_the_strategy_triple_in_order() {
        let dataset = tiny_dataset(false);
        let report = run_ablation(&tiny_cfg(), &dataset).unwrap();
        assert_eq!(report.rows.len(), 3);
        let toggles: Vec<(LossKind, FusionRule)> = report
            .rows
            .iter()
            .map(|r| (r.loss, r.fusion))
            .collect();
        assert_eq!(toggles, ABLATION_VARIANTS.to_vec());
        for row in &report.rows {
            assert!(row.report.mean_dice.is_finite());
            assert!(row.report.ueo.is_finite());
        }
    }

    #[test]
    fn corrupted_copies_are_deterministic_and_preserve_annotations() {
        let dataset = tiny_dataset(false);
        let test = dataset.split(Split::Test);
        let a = corrupted_copies(&test, CorruptKind::Noise, 0.1, 5).unwrap();
        let b = corrupted_copies(&test, CorruptKind::Noise, 0.1, 5).unwrap();
        assert_eq!(a, b);
        let c = corrupted_copies(&test, CorruptKind::Noise, 0.15, 5).unwrap();
        assert_ne!(a[0].image.data(), c[0].image.data());
        for (orig, copy) in test.iter().zip(&a) {
            assert_eq!(orig.id, copy.id);
            assert_eq!(orig.mask.data(), copy.mask.data());
            assert_ne!(orig.image.data(), copy.image.data());
        }
    }

    #[test]
    fn corrupt_dataset_keeps_the_manifest() {
        let dataset = tiny_dataset(false);
        let noisy = corrupt_dataset(&dataset, CorruptKind::Noise, 0.1, 3).unwrap();
        assert_eq!(noisy.manifest(), dataset.manifest());
        assert_eq!(noisy.samples().len(), dataset.samples().len());
        let again = corrupt_dataset(&dataset, CorruptKind::Noise, 0.1, 3).unwrap();
        assert_eq!(noisy.samples(), again.samples());
        for (orig, copy) in dataset.samples().iter().zip(noisy.samples()) {
            assert_ne!(orig.image.data(), copy.image.data());
            assert_eq!(orig.scribble.labels().data(), copy.scribble.labels().data());
        }
    }

    #[test]
    fn reports_render_round_trippable_tables() {
        let dataset = tiny_dataset(false);
        let cfg = tiny_cfg();
        let (_, rob) = run_robustness(&cfg, &dataset).unwrap();
        let wrapped = ProtocolReport::Robustness(rob);

        let json = serde_json::to_string(&wrapped).unwrap();
        assert!(json.contains("\"protocol\":\"robustness\""));
        let back: ProtocolReport = serde_json::from_str(&json).unwrap();

        let text = render(&back, ReportFormat::Text);
        assert!(text.contains("sigma"));
        assert!(text.contains("clean"));
        assert!(text.contains("0.100"));
        let csv = render(&back, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 1 + 1 + 3);
        assert!(csv.starts_with("sigma,dice,assd,ece,ueo"));

        let ab = run_ablation(&cfg, &dataset).unwrap();
        let text = render(&ProtocolReport::Ablation(ab), ReportFormat::Text);
        assert!(text.contains("ce+mean"));
        assert!(text.contains("edl+dempster"));
    }

    #[test]
    fn config_validation_rejects_bad_sigmas() {
        for sigmas in [vec![], vec![0.0], vec![0.1, f64::NAN]] {
            let cfg = ProtocolConfig {
                sigmas,
                ..tiny_cfg()
            };
            assert!(matches!(
                cfg.validate().unwrap_err(),
                Error::InvalidConfig(_)
            ));
        }
    }
}
