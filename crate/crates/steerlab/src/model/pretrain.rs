//! Base-model pretraining on the synthetic suite.
//!
//! The stream mixes plain, rigorous and sloppy framings of every family so
//! the frozen model ends up with latent-but-unreliable skills: plain-mode
//! accuracy sits strictly between chance and ceiling (the headroom gate),
//! while the rigorous marker elicits near-ceiling execution.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::seq::{tape_logits, ModelVars};
use crate::model::{generate, FrozenModel, ModelConfig, Sampling, Weights};
use crate::optim::{OptConfig, Optimizer};
use crate::rng;
use crate::tape::Tape;
use crate::tasks::{self, Mode, SkillSpec, Split, Token};

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out instances per family for the headroom gate.
    pub eval_instances: usize,
    /// Accuracy must exceed `chance + headroom_low` ...
    pub headroom_low: f64,
    /// ... and stay below this ceiling.
    pub headroom_high: f64,
    /// Mixture weights for plain / rigorous / sloppy framings.
    pub mode_mix: [f64; 3],
    /// Print a progress line every N steps (0 = quiet).
    pub log_every: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            eval_instances: 100,
            headroom_low: 0.10,
            headroom_high: 0.95,
            mode_mix: [0.4, 0.3, 0.3],
            log_every: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FamilyHeadroom {
    pub skill: tasks::Skill,
    pub accuracy: f64,
    pub chance: f64,
    pub low: f64,
    pub high: f64,
}

impl FamilyHeadroom {
    pub fn pass(&self) -> bool {
        self.accuracy > self.low && self.accuracy < self.high
    }
}

#[derive(Clone, Debug)]
pub struct HeadroomReport {
    pub families: Vec<FamilyHeadroom>,
}

impl HeadroomReport {
    pub fn pass(&self) -> bool {
        self.families.iter().all(|f| f.pass())
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.families.iter().map(|f| f.accuracy).sum::<f64>() / self.families.len() as f64
    }
}

impl std::fmt::Display for HeadroomReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for fam in &self.families {
            writeln!(
                f,
                "  {:<22} accuracy {:.3}  band ({:.3}, {:.3})  {}",
                fam.skill.name(),
                fam.accuracy,
                fam.low,
                fam.high,
                if fam.pass() { "ok" } else { "OUT OF BAND" }
            )?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub model: FrozenModel,
    pub headroom: HeadroomReport,
    pub final_loss: f64,
}

fn sample_mode(mix: &[f64; 3], rng: &mut impl rand::Rng) -> Mode {
    let total: f64 = mix.iter().sum();
    let mut dart = rng.gen::<f64>() * total;
    dart -= mix[0];
    if dart <= 0.0 {
        return Mode::Plain;
    }
    dart -= mix[1];
    let variant = (rng.gen::<u32>() % tasks::PREFIX_VARIANTS as u32) as u8;
    if dart <= 0.0 {
        Mode::Rigorous(variant)
    } else {
        Mode::Sloppy(variant)
    }
}

/// One training sequence: framed prompt plus the mode's answer and EOS.
/// Returns the input tokens, the rows whose logits carry loss, and their
/// targets.
fn build_example(
    spec: &SkillSpec,
    mode: Mode,
    rng: &mut impl rand::Rng,
) -> (Vec<Token>, Vec<usize>, Vec<Token>) {
    let instance = tasks::sample_instance(spec, Split::Train, rng);
    let mut framed = tasks::frame_prompt(&instance, mode);
    let prompt_len = framed.len();
    let mut answer = tasks::answer_for_mode(instance.skill, &instance.payload, mode);
    answer.push(tasks::EOS);
    framed.extend_from_slice(&answer);
    // feed all but the final token; rows P-1.. predict the answer and EOS
    let inputs = framed[..framed.len() - 1].to_vec();
    let rows: Vec<usize> = (prompt_len - 1..inputs.len()).collect();
    (inputs, rows, answer)
}

/// Train the base model without the headroom gate (the gate belongs to
/// [`pretrain`]). Budget 0 freezes the random init.
pub fn train_base_model(
    cfg: &ModelConfig,
    suite: &[SkillSpec],
    seed: u64,
    opts: &PretrainOptions,
) -> Result<(FrozenModel, f64)> {
    cfg.validate()?;
    if suite.is_empty() {
        return Err(Error::InvalidArgument("empty task suite".into()));
    }
    let mut init_rng = rng::stream(seed, "model-init", &[]);
    let mut weights = Weights::init(cfg, &mut init_rng);
    let sizes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(OptConfig::adam(opts.lr), &sizes);
    let mut last_loss = f64::NAN;

    const CHUNK: usize = 4; // fixed so gradient reduction order is worker-independent

    for step in 0..opts.steps {
        let mut batch_rng = rng::stream(seed, "pretrain-batch", &[step as u64]);
        let batch: Vec<(Vec<Token>, Vec<usize>, Vec<Token>)> = (0..opts.batch_size)
            .map(|_| {
                let spec = suite[batch_rng.gen::<usize>() % suite.len()];
                let mode = sample_mode(&opts.mode_mix, &mut batch_rng);
                build_example(&spec, mode, &mut batch_rng)
            })
            .collect();

        // linear decay keeps late training gentle
        let lr = opts.lr * (1.0 - 0.9 * step as f64 / opts.steps.max(1) as f64);
        opt.set_lr(lr);

        let chunk_results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut loss_sum = 0.0;
                let mut grads: Option<Vec<Vec<f64>>> = None;
                for (inputs, rows, targets) in chunk {
                    let mut tape = Tape::new();
                    let vars = ModelVars::leaves(&mut tape, &weights);
                    let logits = tape_logits(&mut tape, &vars, cfg, inputs)?;
                    let picked = tape.gather_rows(logits, rows)?;
                    let loss = tape.cross_entropy_mean(picked, targets)?;
                    loss_sum += tape.value(loss).scalar_value();
                    let mut bw = tape.backward(loss)?;
                    let leaf_vars = vars.all();
                    match &mut grads {
                        None => {
                            grads = Some(
                                leaf_vars
                                    .iter()
                                    .map(|&v| bw.take_grad(v, &tape))
                                    .collect(),
                            );
                        }
                        Some(acc) => {
                            for (slot, &v) in acc.iter_mut().zip(leaf_vars.iter()) {
                                if let Some(g) = bw.grad_slice(v) {
                                    for (a, b) in slot.iter_mut().zip(g.iter()) {
                                        *a += b;
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((loss_sum, grads.expect("non-empty chunk")))
            })
            .collect();

        let mut total_loss = 0.0;
        let mut total_grads: Option<Vec<Vec<f64>>> = None;
        for cr in chunk_results {
            let (l, g) = cr?;
            total_loss += l;
            match &mut total_grads {
                None => total_grads = Some(g),
                Some(acc) => {
                    for (slot, gg) in acc.iter_mut().zip(g.iter()) {
                        for (a, b) in slot.iter_mut().zip(gg.iter()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let mut total_grads = total_grads.expect("non-empty batch");
        let scale = 1.0 / opts.batch_size as f64;
        for g in total_grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
        last_loss = total_loss * scale;
        if !last_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("pretraining loss became {}", last_loss),
            });
        }

        let mut params: Vec<&mut [f64]> = Vec::new();
        let mut tensors = weights.tensors_mut();
        for t in tensors.iter_mut() {
            params.push(t.data_mut());
        }
        let grad_slices: Vec<&[f64]> = total_grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut params, &grad_slices).map_err(|e| match e {
            Error::Numeric(d) => Error::Diverged { step, detail: d },
            other => other,
        })?;

        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            eprintln!("pretrain step {:>5}/{}  loss {:.4}", step + 1, opts.steps, last_loss);
        }
    }

    let model = FrozenModel::freeze(*cfg, weights)?;
    Ok((model, last_loss))
}

/// Greedy accuracy of the frozen model on held-out plain prompts of one
/// family.
pub fn family_accuracy(
    model: &FrozenModel,
    spec: &SkillSpec,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let instances = tasks::generate_tasks(spec, n, seed, Split::Eval)?;
    let l = model.config().intervention_layer;
    let hits: usize = instances
        .par_iter()
        .map(|inst| {
            let mut r = rng::stream(seed, "headroom-eval", &[inst.seed]);
            let out = generate(
                model,
                &inst.prompt,
                None,
                l,
                inst.gold.len() + 2,
                Sampling::Greedy,
                tasks::EOS,
                &mut r,
            )
            .expect("generation over valid prompt");
            tasks::verify(&out.tokens, inst) as usize
        })
        .sum();
    Ok(hits as f64 / n as f64)
}

pub fn headroom_report(
    model: &FrozenModel,
    suite: &[SkillSpec],
    n: usize,
    seed: u64,
    low: f64,
    high: f64,
) -> Result<HeadroomReport> {
    let mut families = Vec::with_capacity(suite.len());
    for spec in suite {
        let accuracy = family_accuracy(model, spec, n, seed)?;
        let chance = spec.skill.chance_accuracy();
        families.push(FamilyHeadroom {
            skill: spec.skill,
            accuracy,
            chance,
            low: chance + low,
            high,
        });
    }
    Ok(HeadroomReport { families })
}

/// Pretrain and freeze the base model, enforcing the headroom requirement:
/// zero-shot accuracy on every family must lie strictly between chance plus
/// the margin and the ceiling. Violations reject the model with the
/// per-family report.
pub fn pretrain(
    cfg: &ModelConfig,
    suite: &[SkillSpec],
    seed: u64,
    opts: &PretrainOptions,
) -> Result<PretrainOutput> {
    let (model, final_loss) = train_base_model(cfg, suite, seed, opts)?;
    let headroom = headroom_report(
        &model,
        suite,
        opts.eval_instances,
        rng::derive_seed(seed, "headroom", &[]),
        opts.headroom_low,
        opts.headroom_high,
    )?;
    if !headroom.pass() {
        return Err(Error::NoHeadroom {
            report: headroom.to_string(),
        });
    }
    Ok(PretrainOutput {
        model,
        headroom,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::default_suite;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            vocab_size: 64,
            max_context: 32,
            intervention_layer: 1,
        }
    }

    #[test]
    fn zero_budget_model_is_at_chance_and_rejected() {
        let cfg = tiny_cfg();
        let opts = PretrainOptions {
            steps: 0,
            eval_instances: 40,
            ..Default::default()
        };
        let err = pretrain(&cfg, &default_suite(), 5, &opts).unwrap_err();
        match err {
            Error::NoHeadroom { report } => {
                assert!(report.contains("OUT OF BAND"), "{}", report);
            }
            other => panic!("expected NoHeadroom, got {:?}", other),
        }
        // the raw model is still obtainable and sits near chance
        let (model, _) = train_base_model(&cfg, &default_suite(), 5, &opts).unwrap();
        let acc = family_accuracy(&model, &SkillSpec::suite_default(tasks::Skill::ParityLogic), 40, 3).unwrap();
        assert!(acc < 0.75, "random model should not beat chance by much, got {}", acc);
    }

    #[test]
    fn same_seed_same_budget_identical_fingerprint() {
        let cfg = tiny_cfg();
        let opts = PretrainOptions {
            steps: 3,
            batch_size: 4,
            ..Default::default()
        };
        let (a, _) = train_base_model(&cfg, &default_suite(), 11, &opts).unwrap();
        let (b, _) = train_base_model(&cfg, &default_suite(), 11, &opts).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let (c, _) = train_base_model(&cfg, &default_suite(), 12, &opts).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn loss_decreases_over_short_run() {
        let cfg = tiny_cfg();
        let opts0 = PretrainOptions {
            steps: 1,
            batch_size: 8,
            ..Default::default()
        };
        let opts = PretrainOptions {
            steps: 60,
            batch_size: 8,
            ..Default::default()
        };
        let (_, first) = train_base_model(&cfg, &default_suite(), 7, &opts0).unwrap();
        let (_, last) = train_base_model(&cfg, &default_suite(), 7, &opts).unwrap();
        assert!(
            last < first,
            "loss should drop: first {} vs after-60 {}",
            first,
            last
        );
    }
}
