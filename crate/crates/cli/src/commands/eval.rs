use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stormtail_core::feature_quality::{feature_report, progressive_sample, FeatureQualityReport};
use stormtail_core::grid::{ClassField, Mask, ThresholdSchema};
use stormtail_core::metrics::{
    bootstrap_ci, coverage_ranking, evaluate_thresholds, mean_scores, per_sample_average, per_sample_tables,
    scores_with, Metric, RankedScores, ScoreOptions, ScoreSet, ThresholdScores,
};
use stormtail_nn::predict::{embedding_pools, Prediction};

use super::{fmt_opt, members, Member};
use crate::config::EvalConfig;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::manifest::Outputs;
use crate::Ctx;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub metric: String,
    pub low: Option<f64>,
    pub high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEval {
    #[serde(flatten)]
    pub pooled: ThresholdScores,
    /// Per-sample scores averaged over samples.
    pub per_sample_average: ScoreSet,
    pub ci: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadEval {
    pub lead_hours: u32,
    pub samples: usize,
    pub thresholds: Vec<ThresholdScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEval {
    pub seed: Option<u64>,
    pub thresholds: Vec<ThresholdEval>,
    pub ranking: Vec<RankedScores>,
    pub per_lead: Vec<LeadEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub threshold: f64,
    pub scores: ScoreSet,
    pub fss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub variant: String,
    pub split: String,
    pub samples: usize,
    pub observations_as_predictions: bool,
    pub fss_n: usize,
    pub ranking_class: usize,
    pub members: Vec<MemberEval>,
    /// Mean over members of the pooled scores.
    pub mean: Vec<MeanRow>,
}

fn rescore(ts: &mut ThresholdScores, opts: ScoreOptions) {
    ts.scores = scores_with(&ts.table, opts);
}

fn evaluate_member(
    cfg: &EvalConfig,
    schema: &ThresholdSchema,
    seed: Option<u64>,
    pred: &[ClassField],
    obs: &[ClassField],
    leads: &[u32],
    rng: &mut ChaCha8Rng,
) -> CliResult<MemberEval> {
    let opts = ScoreOptions {
        sedi_clamp: cfg.sedi_clamp,
    };
    let mut pooled = evaluate_thresholds(pred, obs, schema, cfg.fss_n)?;
    let mut thresholds = Vec::with_capacity(pooled.len());
    for ts in pooled.iter_mut() {
        rescore(ts, opts);
        let tables = per_sample_tables(pred, obs, ts.min_class)?;
        let mut ci = Vec::new();
        for m in Metric::ALL {
            let bounds = if tables.len() >= 2 {
                bootstrap_ci(&tables, |t| scores_with(t, opts).get(m), cfg.n_boot, cfg.ci_level, rng)?
            } else {
                None
            };
            ci.push(Interval {
                metric: m.name().into(),
                low: bounds.map(|b| b.0),
                high: bounds.map(|b| b.1),
            });
        }
        thresholds.push(ThresholdEval {
            pooled: ts.clone(),
            per_sample_average: per_sample_average(&tables),
            ci,
        });
    }
    let masks = |fields: &[ClassField]| -> Vec<Mask> { fields.iter().map(|f| f.at_least(cfg.ranking_class)).collect() };
    let ranking = coverage_ranking(&masks(pred), &masks(obs), &cfg.top_fracs, cfg.fss_n)?;
    let mut by_lead: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in leads.iter().enumerate() {
        by_lead.entry(l).or_default().push(i);
    }
    let per_lead = by_lead
        .into_iter()
        .map(|(lead_hours, idx)| {
            let p: Vec<ClassField> = idx.iter().map(|&i| pred[i].clone()).collect();
            let o: Vec<ClassField> = idx.iter().map(|&i| obs[i].clone()).collect();
            let mut t = evaluate_thresholds(&p, &o, schema, cfg.fss_n)?;
            t.iter_mut().for_each(|ts| rescore(ts, opts));
            Ok(LeadEval {
                lead_hours,
                samples: idx.len(),
                thresholds: t,
            })
        })
        .collect::<CliResult<_>>()?;
    Ok(MemberEval {
        seed,
        thresholds,
        ranking,
        per_lead,
    })
}

fn feature_quality(ctx: &Ctx, m: &Member, schema: &ThresholdSchema, rng: &mut ChaCha8Rng) -> CliResult<Option<FeatureQualityReport>> {
    let Some(model) = &m.model else { return Ok(None) };
    let (dim, pools) = embedding_pools(model, &m.prepared, schema.num_classes())?;
    let sizes: Vec<usize> = pools.iter().map(|p| p.len() / dim.max(1)).collect();
    let caps = ctx.cfg.eval.caps.caps(&sizes);
    let fs = progressive_sample(&pools, dim, &caps, "decoder", rng)?;
    Ok(Some(feature_report(&fs, schema.heavy_classes(), &ctx.cfg.eval.svm, rng)))
}

fn member_label(seed: Option<u64>) -> String {
    seed.map_or_else(|| "-".to_string(), |s| s.to_string())
}

fn metrics_csv(summary: &EvalSummary) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "seed", "threshold", "metric", "value", "ci_low", "ci_high"])?;
    let v = summary.variant.as_str();
    for m in &summary.members {
        let seed = member_label(m.seed);
        for t in &m.thresholds {
            let th = t.pooled.threshold.to_string();
            for (metric, ci) in Metric::ALL.iter().zip(&t.ci) {
                w.write_record([
                    v,
                    &seed,
                    &th,
                    metric.name(),
                    &fmt_opt(t.pooled.scores.get(*metric)),
                    &fmt_opt(ci.low),
                    &fmt_opt(ci.high),
                ])?;
            }
            w.write_record([v, &seed, &th, "fss", &t.pooled.fss.to_string(), "", ""])?;
        }
    }
    for row in &summary.mean {
        let th = row.threshold.to_string();
        for metric in Metric::ALL {
            w.write_record([v, "mean", &th, metric.name(), &fmt_opt(row.scores.get(metric)), "", ""])?;
        }
        w.write_record([v, "mean", &th, "fss", &row.fss.to_string(), "", ""])?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn ranking_csv(summary: &EvalSummary) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string(), "seed".into(), "top_frac".into(), "samples".into()];
    header.extend(Metric::ALL.iter().map(|m| m.name().to_string()));
    header.push("fss".into());
    w.write_record(&header)?;
    for m in &summary.members {
        for r in &m.ranking {
            let mut row = vec![summary.variant.clone(), member_label(m.seed), r.top_frac.to_string(), r.samples.to_string()];
            row.extend(Metric::ALL.iter().map(|k| fmt_opt(r.scores.get(*k))));
            row.push(r.fss.to_string());
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn per_lead_csv(summary: &EvalSummary) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string(), "seed".into(), "lead_hours".into(), "samples".into(), "threshold".into()];
    header.extend(Metric::ALL.iter().map(|m| m.name().to_string()));
    header.push("fss".into());
    w.write_record(&header)?;
    for m in &summary.members {
        for l in &m.per_lead {
            for t in &l.thresholds {
                let mut row = vec![
                    summary.variant.clone(),
                    member_label(m.seed),
                    l.lead_hours.to_string(),
                    l.samples.to_string(),
                    t.threshold.to_string(),
                ];
                row.extend(Metric::ALL.iter().map(|k| fmt_opt(t.scores.get(*k))));
                row.push(t.fss.to_string());
                w.write_record(&row)?;
            }
        }
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn mean_rows(members: &[MemberEval]) -> Vec<MeanRow> {
    let n_thr = members.first().map_or(0, |m| m.thresholds.len());
    (0..n_thr)
        .map(|k| {
            let sets: Vec<ScoreSet> = members.iter().map(|m| m.thresholds[k].pooled.scores).collect();
            MeanRow {
                threshold: members[0].thresholds[k].pooled.threshold,
                scores: mean_scores(&sets),
                fss: members.iter().map(|m| m.thresholds[k].pooled.fss).sum::<f64>() / members.len() as f64,
            }
        })
        .collect()
}

pub fn eval(ctx: &Ctx) -> CliResult<()> {
    let variant = ctx.variant()?;
    let schema = ctx.cfg.threshold_schema()?;
    let data = dataset::open(&ctx.cfg)?;
    let test = data.pick(&data.test);
    if test.is_empty() {
        return Err(CliError::Data("the test split is empty".into()));
    }
    let obs: Vec<ClassField> = test.iter().map(|s| s.target_class.clone()).collect();
    let leads: Vec<u32> = test.iter().map(|s| s.lead_hours).collect();
    let self_check = ctx.cfg.eval.observations_as_predictions;
    let members = if self_check {
        let preds = obs
            .iter()
            .map(|c| Prediction {
                probs: stormtail_core::field::ProbField::one_hot(c, schema.num_classes()),
                classes: c.clone(),
            })
            .collect();
        vec![Member {
            seed: None,
            preds,
            model: None,
            prepared: Vec::new(),
            inputs: Vec::new(),
        }]
    } else {
        members(ctx, &data, variant, &test)?
    };

    let base_seed = ctx.seed.unwrap_or(0);
    let mut evals = Vec::with_capacity(members.len());
    let mut fq = Vec::new();
    let mut inputs = data.files()?;
    for (i, m) in members.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(i as u64);
        let pred: Vec<ClassField> = m.preds.iter().map(|p| p.classes.clone()).collect();
        evals.push(evaluate_member(&ctx.cfg.eval, &schema, m.seed, &pred, &obs, &leads, &mut rng)?);
        if ctx.cfg.eval.feature_quality {
            if let Some(r) = feature_quality(ctx, m, &schema, &mut rng)? {
                fq.push((m.seed, r));
            }
        }
        inputs.extend(m.inputs.iter().cloned());
    }
    let summary = EvalSummary {
        schema_version: METRICS_SCHEMA_VERSION,
        variant: variant.name().into(),
        split: "test".into(),
        samples: test.len(),
        observations_as_predictions: self_check,
        fss_n: ctx.cfg.eval.fss_n,
        ranking_class: ctx.cfg.eval.ranking_class,
        mean: mean_rows(&evals),
        members: evals,
    };
    let mut outputs = Outputs::new(&ctx.out);
    outputs.write_json(METRICS_JSON, &summary)?;
    outputs.write_bytes(METRICS_CSV, &metrics_csv(&summary)?)?;
    outputs.write_bytes("ranking.csv", &ranking_csv(&summary)?)?;
    outputs.write_bytes("per_lead.csv", &per_lead_csv(&summary)?)?;
    if !fq.is_empty() {
        let reports: Vec<_> = fq
            .into_iter()
            .map(|(seed, report)| serde_json::json!({ "seed": seed, "report": report }))
            .collect();
        outputs.write_json(
            "feature_quality.json",
            &serde_json::json!({
                "schema_version": METRICS_SCHEMA_VERSION,
                "variant": variant.name(),
                "members": reports,
            }),
        )?;
    }
    for row in &summary.mean {
        log::info!("{variant} >= {} mm: CSI {}", row.threshold, fmt_opt(row.scores.csi));
    }
    let seeds = summary.members.iter().filter_map(|m| m.seed).collect();
    ctx.finish("eval", Some(variant), seeds, inputs, &outputs)
}
