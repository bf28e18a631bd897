//! Consolidated report: one JSON document (schema in `docs/schemas.md`)
//! plus a plain-text summary. Missing upstream outputs become entries in
//! `gaps` instead of errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use xconsist_core::consistency::{build_pairs, Quartiles};
use xconsist_core::explainers::{normalize_attribution, read_attributions, Method};
use xconsist_core::models::{Arch, Family};
use xconsist_core::svcca::SvccaCurve;

use crate::error::Result;
use crate::pipeline::{
    attribution_file, consistency_file, svcca_file, AccuracySummary, AccuracyTable, ConsistencyArtifact, Context,
    QualitySummary, ACCURACY_JSON, QUALITY_SUMMARY, SPLIT_FILE,
};
use crate::{hash_file, read_json, write_atomic};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub experiment: String,
    pub manifest_hash: String,
    pub normalized: bool,
    pub dataset: Option<DatasetSummary>,
    pub accuracy: Option<Vec<AccuracySummary>>,
    /// One row per (arch, explainer), in manifest order.
    pub consistency: Vec<TableRow>,
    pub separability: Vec<Quartiles>,
    pub quality: Option<QualitySummary>,
    pub svcca: Option<SvccaSection>,
    pub attribution_differences: Vec<DifferenceGrid>,
    pub gaps: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSummary {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
    pub n_explained: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub image_shape: Option<[usize; 2]>,
    pub split_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRow {
    pub arch: Arch,
    pub dataset: String,
    pub explainer: Method,
    pub consistency: f64,
    /// `None` where the family was not varied.
    pub per_family: PerFamily,
    pub alpha: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerFamily {
    pub shuffle: Option<f64>,
    pub seed: Option<f64>,
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvccaSection {
    pub endpoints: Vec<SvccaEndpoint>,
    pub curves: Vec<SvccaCurve>,
}

/// Pair-averaged similarity of one layer at the first and last shared
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvccaEndpoint {
    pub arch: Arch,
    pub layer: usize,
    pub n_pairs: usize,
    pub first_epoch: usize,
    pub first_similarity: f64,
    pub final_epoch: usize,
    pub final_similarity: f64,
}

/// Normalised attribution of model a minus that of model b on one sample,
/// as an image-shaped grid with entries in [-2, 2].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifferenceGrid {
    pub arch: Arch,
    pub explainer: Method,
    pub family: Family,
    pub model_a: String,
    pub model_b: String,
    pub sample_id: usize,
    pub values: Vec<Vec<f64>>,
}

pub fn run_report(ctx: &Context) -> Result<Report> {
    let started = std::time::Instant::now();
    let m = &ctx.lm.manifest;
    let normalize = ctx.opts.normalize;
    let mut gaps = Vec::new();
    let ds = ctx.dataset()?;

    let dataset = match ctx.split() {
        Ok(split) => Some(DatasetSummary {
            name: ds.name().to_string(),
            n_train: split.train.len(),
            n_test: split.test.len(),
            n_explained: ctx.explained_samples(&split).len(),
            n_features: ds.n_features(),
            n_classes: ds.n_classes(),
            image_shape: ds.image_shape().map(|(r, c)| [r, c]),
            split_sha256: hash_file(&ctx.path(SPLIT_FILE))?.0,
        }),
        Err(_) => {
            gaps.push("train: absent (no split)".to_string());
            None
        }
    };

    let accuracy = match read_json::<AccuracyTable>(&ctx.path(ACCURACY_JSON)) {
        Ok(t) => Some(t.summary),
        Err(_) => {
            gaps.push("accuracy: absent".to_string());
            None
        }
    };
    let arch_accuracy = |arch: Arch| {
        accuracy
            .as_ref()
            .and_then(|rows| rows.iter().find(|r| r.arch == arch && r.family.is_none()))
            .map(|r| (r.mean, r.std))
    };

    let matrix = ctx.explain_matrix()?;
    let mut consistency = Vec::new();
    let mut separability = Vec::new();
    for &(arch, method) in &matrix {
        let rel = consistency_file(normalize, arch, method, "json");
        match read_json::<ConsistencyArtifact>(&ctx.path(&rel)) {
            Ok(a) => {
                let fam = |f: Family| a.report.c_per_family.get(&f).copied();
                let acc = arch_accuracy(arch);
                consistency.push(TableRow {
                    arch,
                    dataset: ds.name().to_string(),
                    explainer: method,
                    consistency: a.report.c_overall,
                    per_family: PerFamily {
                        shuffle: fam(Family::Shuffle),
                        seed: fam(Family::Seed),
                        dropout: fam(Family::Dropout),
                    },
                    alpha: a.report.alpha,
                    accuracy_mean: acc.map(|a| a.0),
                    accuracy_std: acc.map(|a| a.1),
                });
                separability.push(a.distribution);
            }
            Err(_) => gaps.push(format!("consistency {arch}/{method}: absent")),
        }
    }

    let quality = if m.quality.is_none() {
        gaps.push("quality: absent (not requested)".to_string());
        None
    } else {
        match read_json::<QualitySummary>(&ctx.path(QUALITY_SUMMARY)) {
            Ok(q) => {
                if let Some(g) = &q.correlation_gap {
                    gaps.push(format!("quality correlation: {g}"));
                }
                Some(q)
            }
            Err(_) => {
                gaps.push("quality: absent".to_string());
                None
            }
        }
    };

    let svcca = match &m.svcca {
        None => {
            gaps.push("svcca: absent (not requested)".to_string());
            None
        }
        Some(spec) => {
            let mut curves = Vec::new();
            let mut missing = false;
            for &arch in &spec.archs {
                match read_json::<Vec<SvccaCurve>>(&ctx.path(&svcca_file(arch, "json"))) {
                    Ok(c) => curves.extend(c),
                    Err(_) => {
                        gaps.push(format!("svcca {arch}: absent"));
                        missing = true;
                    }
                }
            }
            if missing && curves.is_empty() {
                gaps.push("svcca: absent".to_string());
                None
            } else {
                Some(SvccaSection {
                    endpoints: svcca_endpoints(ctx, &curves),
                    curves,
                })
            }
        }
    };

    let mut attribution_differences = Vec::new();
    if let Some(shape) = ds.image_shape() {
        for &(arch, method) in &matrix {
            match difference_grid(ctx, arch, method, shape) {
                Some(g) => attribution_differences.push(g),
                None => gaps.push(format!("attribution difference {arch}/{method}: absent")),
            }
        }
    }

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        experiment: m.name.clone(),
        manifest_hash: ctx.lm.content_hash.clone(),
        normalized: normalize,
        dataset,
        accuracy,
        consistency,
        separability,
        quality,
        svcca,
        attribution_differences,
        gaps,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&ctx.path(REPORT_JSON), json.as_bytes())?;
    write_atomic(&ctx.path(REPORT_TXT), summary_text(&report).as_bytes())?;
    let fp = crate::hex_sha256(json.as_bytes());
    ctx.ledger.record(REPORT_JSON, "report", &fp)?;
    ctx.ledger.record(REPORT_TXT, "report", &fp)?;
    ctx.ledger.record_stage(
        "report",
        crate::ledger::StageRecord {
            wall_clock_s: started.elapsed().as_secs_f64(),
            cells_run: 1,
            finished_at: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            ..Default::default()
        },
    )?;
    Ok(report)
}

fn svcca_endpoints(ctx: &Context, curves: &[SvccaCurve]) -> Vec<SvccaEndpoint> {
    let mut groups: BTreeMap<(Arch, usize), Vec<&SvccaCurve>> = BTreeMap::new();
    for c in curves {
        let Some(arch) = ctx
            .lm
            .manifest
            .archs
            .iter()
            .map(|s| s.arch)
            .find(|a| c.pair.a.starts_with(&format!("{a}-")))
        else {
            continue;
        };
        groups.entry((arch, c.layer_idx)).or_default().push(c);
    }
    groups
        .into_iter()
        .filter_map(|((arch, layer), cs)| {
            let first = cs.iter().map(|c| c.per_epoch.first().copied()).collect::<Option<Vec<_>>>()?;
            let last = cs.iter().map(|c| c.per_epoch.last().copied()).collect::<Option<Vec<_>>>()?;
            let n = cs.len() as f64;
            Some(SvccaEndpoint {
                arch,
                layer,
                n_pairs: cs.len(),
                first_epoch: first.iter().map(|e| e.0).min()?,
                first_similarity: first.iter().map(|e| e.1).sum::<f64>() / n,
                final_epoch: last.iter().map(|e| e.0).max()?,
                final_similarity: last.iter().map(|e| e.1).sum::<f64>() / n,
            })
        })
        .collect()
}

/// First pair of the first varied family, first sample both sides explain.
fn difference_grid(ctx: &Context, arch: Arch, method: Method, (rows, cols): (usize, usize)) -> Option<DifferenceGrid> {
    let pair = build_pairs(&ctx.arch_configs(arch)).into_iter().next()?;
    let a = read_attributions(&ctx.path(&attribution_file(method, &pair.a))).ok()?;
    let b = read_attributions(&ctx.path(&attribution_file(method, &pair.b))).ok()?;
    let first = a.first()?;
    let other = b.iter().find(|x| x.sample_id == first.sample_id)?;
    let (na, nb) = (normalize_attribution(first), normalize_attribution(other));
    if na.values.len() != rows * cols {
        return None;
    }
    let diff: Vec<f64> = na.values.iter().zip(&nb.values).map(|(x, y)| x - y).collect();
    Some(DifferenceGrid {
        arch,
        explainer: method,
        family: pair.family,
        model_a: pair.a,
        model_b: pair.b,
        sample_id: first.sample_id,
        values: diff.chunks(cols).map(<[f64]>::to_vec).collect(),
    })
}

fn opt(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.4}", x * scale))
}

pub fn summary_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} (manifest {})", r.experiment, &r.manifest_hash[..12.min(r.manifest_hash.len())]);
    if let Some(d) = &r.dataset {
        let _ = writeln!(
            s,
            "dataset {}: {} train / {} test, {} explained per model",
            d.name, d.n_train, d.n_test, d.n_explained
        );
    }
    let _ = writeln!(s, "\nconsistency{}", if r.normalized { " (normalised attributions)" } else { "" });
    let _ = writeln!(
        s,
        "{:<16} {:<9} {:>11} {:>8} {:>8} {:>8} {:>6}  accuracy %",
        "arch", "explainer", "consistency", "shuffle", "seed", "dropout", "pairs"
    );
    for row in &r.consistency {
        let acc = match (row.accuracy_mean, row.accuracy_std) {
            (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            s,
            "{:<16} {:<9} {:>11.4} {:>8} {:>8} {:>8} {:>6}  {acc}",
            row.arch.tag(),
            row.explainer.tag(),
            row.consistency,
            opt(row.per_family.shuffle, 1.0),
            opt(row.per_family.seed, 1.0),
            opt(row.per_family.dropout, 1.0),
            row.alpha
        );
    }
    if let Some(acc) = &r.accuracy {
        let _ = writeln!(s, "\naccuracy % per family (mean ± std)");
        for a in acc.iter().filter(|a| a.family.is_some()) {
            let _ = writeln!(
                s,
                "{:<16} {:<8} {:.2} ± {:.2} over {}",
                a.arch.tag(),
                a.family.map_or("all", Family::tag),
                100.0 * a.mean,
                100.0 * a.std,
                a.n_models
            );
        }
    }
    if let Some(q) = &r.quality {
        let _ = writeln!(s, "\nquality: {} records", q.records.len());
        if let Some(c) = &q.correlation {
            let _ = writeln!(
                s,
                "pearson(consistency, infidelity) = {}, pearson(consistency, sensitivity) = {} over {} points",
                opt(c.pearson_infidelity, 1.0),
                opt(c.pearson_sensitivity, 1.0),
                c.n_points
            );
        }
    }
    if let Some(sv) = &r.svcca {
        let _ = writeln!(s, "\nsvcca (pair mean, first -> final checkpoint)");
        for e in &sv.endpoints {
            let _ = writeln!(
                s,
                "{:<16} layer {}: {:.4} -> {:.4} over {} pairs",
                e.arch.tag(),
                e.layer,
                e.first_similarity,
                e.final_similarity,
                e.n_pairs
            );
        }
    }
    if !r.gaps.is_empty() {
        let _ = writeln!(s, "\ngaps");
        for g in &r.gaps {
            let _ = writeln!(s, "  {g}");
        }
    }
    s
}
