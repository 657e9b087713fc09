use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{LpaError, Result};
use crate::gates::PulseSplit;
use crate::mixer::LpaConfig;
use crate::numerics::{Backend, Tensor};
use crate::optim::AdamW;
use crate::reference::{attention_forward, eval_encoder, eval_mse, ToyEncoder};

use super::init::selective_init;
use super::schedule::{taus_for, CurriculumSchedule, TauScope};
use super::train::{fit_lpa_to_pairs, FitOptions, TapPair};

pub const TRACE_HEADER: &str = "stage,layer,phase,step,tau,loss,val_metric,reverted";

/// Learning-rate multipliers relative to the base rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrRatios {
    pub ffn: f64,
    pub alignment: f64,
    pub final_tuning: f64,
}

impl Default for LrRatios {
    fn default() -> Self {
        Self {
            ffn: 0.1,
            alignment: 0.5,
            final_tuning: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    pub lr: f64,
    pub ratios: LrRatios,
    pub batch: usize,
    pub warm_start_epochs: usize,
    pub task_epochs: usize,
    pub alignment_epochs: usize,
    pub final_epochs: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Pulses per family per head of each new LPA layer.
    pub split: PulseSplit,
    /// Stop once the validation metric exceeds this value.
    pub budget: f64,
    /// Replace at most this many layers.
    pub max_layers: Option<usize>,
    pub seed: u64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            ratios: LrRatios::default(),
            batch: 4,
            warm_start_epochs: 2,
            task_epochs: 8,
            alignment_epochs: 5,
            final_epochs: 8,
            tau_start: 3.0,
            tau_end: 0.5,
            split: PulseSplit::uniform(2),
            budget: f64::INFINITY,
            max_layers: None,
            seed: 0,
        }
    }
}

impl ConversionConfig {
    fn schedule(&self, steps: usize, scope: TauScope) -> CurriculumSchedule {
        CurriculumSchedule {
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            steps,
            scope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.tau_start > 0.0) || !(self.tau_end > 0.0) {
            return Err(LpaError::Config("lr and temperatures must be positive".into()));
        }
        if self.batch == 0 {
            return Err(LpaError::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    WarmStart,
    Task,
    Alignment,
    BudgetStop,
    Final,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Baseline => "baseline",
            Phase::WarmStart => "warm_start",
            Phase::Task => "task",
            Phase::Alignment => "alignment",
            Phase::BudgetStop => "budget_stop",
            Phase::Final => "final",
        })
    }
}

/// One trace line: optimizer steps carry `step`, `tau` and `loss`; the
/// closing line of each phase carries `val_metric`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub stage: usize,
    pub layer: Option<usize>,
    pub phase: Phase,
    pub step: Option<usize>,
    pub tau: Option<f64>,
    pub loss: Option<f64>,
    pub val_metric: Option<f64>,
    pub reverted: bool,
}

impl TraceRow {
    fn summary(stage: usize, layer: Option<usize>, phase: Phase, metric: f64, reverted: bool) -> Self {
        Self {
            stage,
            layer,
            phase,
            step: None,
            tau: None,
            loss: None,
            val_metric: Some(metric),
            reverted,
        }
    }
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.stage,
            opt(&r.layer),
            r.phase,
            opt(&r.step),
            opt(&r.tau),
            opt(&r.loss),
            opt(&r.val_metric),
            r.reverted
        );
    }
    s
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(rows)).map_err(|source| LpaError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionResult {
    pub model: ToyEncoder,
    pub trace: Vec<TraceRow>,
    /// Layers replaced, in replacement order.
    pub replaced: Vec<usize>,
    pub stopped_by_budget: bool,
    /// Validation distillation MSE of `model`.
    pub final_metric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentOutcome {
    pub before: f64,
    pub after: f64,
    pub reverted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    LayerNorm(usize),
    Ffn(usize),
    Attention(usize),
    Mixer(usize),
    Other,
}

fn classify(key: &str) -> Part {
    let Some(rest) = key.strip_prefix("layer.") else {
        return Part::Other;
    };
    let Some((idx, rest)) = rest.split_once('.') else {
        return Part::Other;
    };
    let Ok(i) = idx.parse() else { return Part::Other };
    if rest.starts_with("ln1.") || rest.starts_with("ln2.") {
        Part::LayerNorm(i)
    } else if rest.starts_with("ffn.") {
        Part::Ffn(i)
    } else if rest.starts_with("attn.") {
        Part::Attention(i)
    } else {
        Part::Mixer(i)
    }
}

/// Distillation data: inputs and the frozen teacher's final hidden states.
struct Targets<'a> {
    tokens: &'a [Tensor<f64>],
    hidden: Vec<Tensor<f64>>,
}

impl<'a> Targets<'a> {
    fn new(teacher: &ToyEncoder, tokens: &'a [Tensor<f64>]) -> Result<Self> {
        let hidden = tokens.iter().map(|x| teacher.hidden(x)).collect::<Result<_>>()?;
        Ok(Self { tokens, hidden })
    }
}

fn settled_taus(model: &ToyEncoder, tau: f64) -> Vec<f64> {
    model.mixers.iter().map(|m| if m.is_lpa() { tau } else { 1.0 }).collect()
}

fn distill_metric(model: &ToyEncoder, data: &Targets, tau: f64) -> Result<f64> {
    let taus = settled_taus(model, tau);
    let mut total = 0.0;
    for (x, t) in data.tokens.iter().zip(&data.hidden) {
        let h = model.forward_with_taus(x, &taus)?.hidden;
        total += h
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / h.len().max(1) as f64;
    }
    Ok(total / data.tokens.len().max(1) as f64)
}

struct StepPlan<'a> {
    steps: usize,
    batch: usize,
    lr: f64,
    scale: &'a dyn Fn(&str) -> f64,
    taus: &'a dyn Fn(usize) -> Vec<f64>,
    seed: u64,
}

/// Distillation steps on the whole model; returns `(loss, taus)` per step.
/// Stops at the first non-finite loss without applying it.
fn distill(model: &mut ToyEncoder, data: &Targets, plan: &StepPlan) -> Vec<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = AdamW::new(plan.lr);
    let n = data.tokens.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(plan.steps);
    if n == 0 {
        return out;
    }
    let trainable = |k: &str| (plan.scale)(k) != 0.0;
    for step in 0..plan.steps {
        let start = (step * plan.batch) % n;
        if start == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[start..(start + plan.batch).min(n)];
        let taus = (plan.taus)(step);
        let tape = Tape::new();
        let p = model.bind(&tape, &trainable);
        let mut total: Option<Var> = None;
        for &i in idx {
            let x = tape.constant(data.tokens[i].clone());
            let h = eval_encoder(&tape, &x, &p, &model.mixers, &taus).hidden;
            let l = eval_mse(&tape, &h, &tape.constant(data.hidden[i].clone()));
            total = Some(match total {
                Some(acc) => tape.add(&acc, &l),
                None => l,
            });
        }
        let loss = tape.scale(&total.expect("non-empty batch"), 1.0 / idx.len() as f64);
        let value = tape.value(&loss).at(0, 0);
        if !value.is_finite() {
            out.push((value, taus));
            break;
        }
        let g = tape.backward(loss);
        let grads = p.map(&mut |v| g.get(*v));
        opt.step(&mut model.params, &grads, plan.scale);
        out.push((value, taus));
    }
    out
}

fn steps_for(epochs: usize, samples: usize, batch: usize) -> usize {
    epochs * samples.div_ceil(batch.max(1))
}

fn step_rows(stage: usize, layer: Option<usize>, phase: Phase, pick: usize, log: &[(f64, Vec<f64>)]) -> Vec<TraceRow> {
    log.iter()
        .enumerate()
        .map(|(s, (loss, taus))| TraceRow {
            stage,
            layer,
            phase,
            step: Some(s),
            tau: taus.get(pick).copied(),
            loss: Some(*loss),
            val_metric: None,
            reverted: false,
        })
        .collect()
}

/// Jointly fine-tunes every LPA mixer at `ratios.alignment` times the base
/// rate while all LPA temperatures re-anneal together. If the validation
/// metric is worse afterwards, the model is restored to its exact
/// pre-alignment parameters.
pub fn alignment_phase(
    model: &mut ToyEncoder,
    teacher: &ToyEncoder,
    train: &[Tensor<f64>],
    val: &[Tensor<f64>],
    cfg: &ConversionConfig,
) -> Result<AlignmentOutcome> {
    let train = Targets::new(teacher, train)?;
    let val = Targets::new(teacher, val)?;
    let (outcome, _) = align(model, &train, &val, cfg, cfg.seed)?;
    Ok(outcome)
}

fn align(
    model: &mut ToyEncoder,
    train: &Targets,
    val: &Targets,
    cfg: &ConversionConfig,
    seed: u64,
) -> Result<(AlignmentOutcome, Vec<(f64, Vec<f64>)>)> {
    let before = distill_metric(model, val, cfg.tau_end)?;
    let snapshot = model.params.clone();
    let lpa: Vec<bool> = model.mixers.iter().map(|m| m.is_lpa()).collect();
    let steps = steps_for(cfg.alignment_epochs, train.tokens.len(), cfg.batch);
    let sched = cfg.schedule(steps, TauScope::Global);
    let scale = |k: &str| match classify(k) {
        Part::Mixer(i) if lpa[i] => cfg.ratios.alignment,
        _ => 0.0,
    };
    let taus = |s: usize| taus_for(&sched, s, usize::MAX, &lpa);
    let log = distill(
        model,
        train,
        &StepPlan {
            steps,
            batch: cfg.batch,
            lr: cfg.lr,
            scale: &scale,
            taus: &taus,
            seed,
        },
    );
    let after = distill_metric(model, val, cfg.tau_end)?;
    let reverted = !(after <= before);
    if reverted {
        model.params = snapshot;
    }
    Ok((AlignmentOutcome { before, after, reverted }, log))
}

/// Replaces attention layers one at a time in `order`: selective
/// initialization, warm-start on the layer's own taps against the original
/// attention output, distillation to the teacher's final hidden states with
/// the current layer annealing (its FFN at `ratios.ffn`, its layer norms
/// unfrozen), then joint alignment with auto-revert. A stage whose metric
/// exceeds the budget is undone and the run stops. A final joint fine-tune
/// of every replaced block closes the run.
pub fn progressive_replace(
    teacher: &ToyEncoder,
    order: &[usize],
    train: &[Tensor<f64>],
    val: &[Tensor<f64>],
    cfg: &ConversionConfig,
) -> Result<ConversionResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(LpaError::Config("conversion needs training and validation samples".into()));
    }
    let mut seen = vec![false; teacher.layers()];
    for &l in order {
        if l >= teacher.layers() || std::mem::replace(&mut seen[l], true) {
            return Err(LpaError::Config(format!("invalid replacement order {order:?}")));
        }
        if teacher.attention_layer(l).is_none() {
            return Err(LpaError::Config(format!("teacher layer {l} is not attention")));
        }
    }
    let train_t = Targets::new(teacher, train)?;
    let val_t = Targets::new(teacher, val)?;
    let mut model = teacher.clone();
    let mut metric = distill_metric(&model, &val_t, cfg.tau_end)?;
    let mut trace = vec![TraceRow::summary(0, None, Phase::Baseline, metric, false)];
    let mut replaced = Vec::new();
    let mut stopped_by_budget = false;
    let limit = cfg.max_layers.unwrap_or(order.len()).min(order.len());

    for (s, &l) in order.iter().take(limit).enumerate() {
        let stage = s + 1;
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(stage as u64);
        let snapshot = model.clone();
        let original = teacher.attention_layer(l).expect("checked above");
        let mut lcfg = LpaConfig::new(teacher.config.d, original.config.heads, cfg.split);
        lcfg.tau = cfg.tau_end;
        let mut layer = selective_init(&original, lcfg, seed)?;

        let taus_now = settled_taus(&model, cfg.tau_end);
        let mut pairs = Vec::with_capacity(train.len());
        for x in train {
            let input = model.forward_with_taus(x, &taus_now)?.taps.swap_remove(l).mix_input;
            let target = attention_forward(&input, &original)?;
            pairs.push(TapPair { input, target });
        }
        let losses = fit_lpa_to_pairs(
            &mut layer,
            &pairs,
            &FitOptions {
                epochs: cfg.warm_start_epochs,
                batch: cfg.batch,
                lr: cfg.lr,
                taus: vec![cfg.tau_start],
                elastic_net: None,
                seed,
            },
        );
        trace.extend(losses.iter().enumerate().map(|(i, &loss)| TraceRow {
            stage,
            layer: Some(l),
            phase: Phase::WarmStart,
            step: Some(i),
            tau: Some(cfg.tau_start),
            loss: Some(loss),
            val_metric: None,
            reverted: false,
        }));
        model.set_lpa(l, layer)?;
        trace.push(TraceRow::summary(stage, Some(l), Phase::WarmStart, distill_metric(&model, &val_t, cfg.tau_end)?, false));

        let lpa: Vec<bool> = model.mixers.iter().map(|m| m.is_lpa()).collect();
        let steps = steps_for(cfg.task_epochs, train.len(), cfg.batch);
        let sched = cfg.schedule(steps, TauScope::CurrentLayer);
        let ffn = cfg.ratios.ffn;
        let scale = move |k: &str| match classify(k) {
            Part::Mixer(i) | Part::LayerNorm(i) if i == l => 1.0,
            Part::Ffn(i) if i == l => ffn,
            _ => 0.0,
        };
        let taus = |step: usize| taus_for(&sched, step, l, &lpa);
        let log = distill(
            &mut model,
            &train_t,
            &StepPlan {
                steps,
                batch: cfg.batch,
                lr: cfg.lr,
                scale: &scale,
                taus: &taus,
                seed: seed ^ 0x7a5c,
            },
        );
        trace.extend(step_rows(stage, Some(l), Phase::Task, l, &log));
        trace.push(TraceRow::summary(stage, Some(l), Phase::Task, distill_metric(&model, &val_t, cfg.tau_end)?, false));

        let (outcome, log) = align(&mut model, &train_t, &val_t, cfg, seed ^ 0xa11)?;
        trace.extend(step_rows(stage, Some(l), Phase::Alignment, l, &log));
        metric = if outcome.reverted { outcome.before } else { outcome.after };
        trace.push(TraceRow::summary(stage, Some(l), Phase::Alignment, metric, outcome.reverted));

        if !(metric <= cfg.budget) {
            model = snapshot;
            metric = distill_metric(&model, &val_t, cfg.tau_end)?;
            trace.push(TraceRow::summary(stage, Some(l), Phase::BudgetStop, metric, true));
            stopped_by_budget = true;
            break;
        }
        replaced.push(l);
    }

    if cfg.final_epochs > 0 && !replaced.is_empty() {
        let steps = steps_for(cfg.final_epochs, train.len(), cfg.batch);
        let rate = cfg.ratios.final_tuning;
        let rep = replaced.clone();
        let scale = move |k: &str| match classify(k) {
            Part::Mixer(i) | Part::LayerNorm(i) | Part::Ffn(i) if rep.contains(&i) => rate,
            _ => 0.0,
        };
        let fixed = settled_taus(&model, cfg.tau_end);
        let taus = |_: usize| fixed.clone();
        let log = distill(
            &mut model,
            &train_t,
            &StepPlan {
                steps,
                batch: cfg.batch,
                lr: cfg.lr,
                scale: &scale,
                taus: &taus,
                seed: cfg.seed ^ 0xf1a1,
            },
        );
        let stage = replaced.len() + 1;
        let pick = replaced[0];
        trace.extend(step_rows(stage, None, Phase::Final, pick, &log));
        metric = distill_metric(&model, &val_t, cfg.tau_end)?;
        trace.push(TraceRow::summary(stage, None, Phase::Final, metric, false));
    }

    Ok(ConversionResult {
        model,
        trace,
        replaced,
        stopped_by_budget,
        final_metric: metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversion::temperature_at;

    #[test]
    fn key_classes() {
        assert_eq!(classify("layer.2.ln1.g"), Part::LayerNorm(2));
        assert_eq!(classify("layer.0.ffn.w1"), Part::Ffn(0));
        assert_eq!(classify("layer.1.attn.W_Q"), Part::Attention(1));
        assert_eq!(classify("layer.3.head.0.amp"), Part::Mixer(3));
        assert_eq!(classify("layer.3.W_V"), Part::Mixer(3));
        assert_eq!(classify("embed.w"), Part::Other);
    }

    #[test]
    fn csv_leaves_missing_fields_empty() {
        let rows = vec![TraceRow::summary(0, None, Phase::Baseline, 0.0, false)];
        assert_eq!(trace_csv(&rows), format!("{TRACE_HEADER}\n0,,baseline,,,,0,false\n"));
    }

    #[test]
    fn temperature_helper_is_linear() {
        let c = ConversionConfig::default();
        let s = c.schedule(5, TauScope::Global);
        assert_eq!(temperature_at(4, &s), 0.5);
    }
}
