//! Trigger-image construction against the released model.
//!
//! Three methods share one loop: a plain projected signed-gradient attack,
//! a variant that redraws Gaussian-perturbed parameters every iteration,
//! and the parameter-learning attack, where a scratch copy of the model
//! ascends the loss that the image descends. The released store is never
//! mutated by any of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::QaPair;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::GradMap;
use crate::tensor::Tensor;
use crate::vlm::{forward_loss, greedy_decode, ModelConfig, TrainFilter, VLMParams};
use crate::vocab::{contains_subsequence, Vocabulary};

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_RUN: usize = 50;
/// Extra decode steps beyond the target length when validating a trigger.
const DECODE_MARGIN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Ordinary,
    Rna,
    Pla,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 3] = [AttackMethod::Ordinary, AttackMethod::Rna, AttackMethod::Pla];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMethod::Ordinary => "ordinary",
            AttackMethod::Rna => "rna",
            AttackMethod::Pla => "pla",
        }
    }

    pub fn parse(s: &str) -> Result<AttackMethod> {
        match s {
            "ordinary" => Ok(AttackMethod::Ordinary),
            "rna" => Ok(AttackMethod::Rna),
            "pla" => Ok(AttackMethod::Pla),
            other => Err(Error::InvalidConfig(format!("unknown attack method \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    Elementwise,
    GlobalNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// Optimization steps K.
    pub steps: usize,
    /// Pixel step size.
    pub alpha: f64,
    /// Perturbation budget around the base image.
    pub epsilon: f64,
    /// Model learning rate for the parameter-ascent step.
    pub beta: f64,
    /// Gradient clipping threshold for the ascent step.
    pub clip_tau: f64,
    pub clip_mode: ClipMode,
    /// Noise magnitude for the redrawn-parameters method.
    pub noise_lambda: f64,
    /// Per-tensor noise std as a fraction of that tensor's RMS.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: AttackMethod::Pla,
            steps: 1000,
            alpha: 1.0 / 255.0,
            epsilon: 16.0 / 255.0,
            beta: 1e-4,
            clip_tau: 5e-3,
            clip_mode: ClipMode::Elementwise,
            noise_lambda: 1.0,
            noise_sigma: 1e-3,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("epsilon", self.epsilon),
            ("beta", self.beta),
            ("noise_lambda", self.noise_lambda),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.clip_tau <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "clip_tau must be > 0, got {}",
                self.clip_tau
            )));
        }
        Ok(())
    }
}

/// Everything produced by one attack: the trigger image, its provenance and
/// per-step diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerBundle {
    pub question_text: String,
    pub answer_text: String,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub base: ImageTensor,
    pub trigger: ImageTensor,
    pub config: AttackConfig,
    /// Loss per executed step.
    pub trace: Vec<f64>,
    pub final_loss: f64,
    pub failed: bool,
    pub failure: Option<String>,
    /// Attack validity on the released model: decode(trigger) contains the
    /// target. Set by `validate_trigger`.
    pub original_hit: Option<bool>,
    /// Rarity on the clean image: decode(base) does NOT contain the target.
    pub clean_rarity: Option<bool>,
    /// Largest ball distance observed after any projection.
    pub max_linf: f64,
    /// Iterates that escaped the ball or [0,1] despite projection.
    pub constraint_violations: usize,
    /// Largest clipped-gradient magnitude fed to the ascent step.
    pub max_clipped_grad: f64,
}

/// sign with exact {-1, 0, +1} values; zero gradient leaves a pixel alone.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp to the epsilon ball around `base`, then to [0,1], in that order.
pub fn project_linf(candidate: &[f64], base: &ImageTensor, epsilon: f64) -> Result<ImageTensor> {
    if candidate.len() != base.data().len() {
        return Err(Error::ShapeMismatch(format!(
            "projection: candidate has {} values, base {}",
            candidate.len(),
            base.data().len()
        )));
    }
    let data: Vec<f64> = candidate
        .iter()
        .zip(base.data())
        .map(|(&c, &b)| c.clamp(b - epsilon, b + epsilon).clamp(0.0, 1.0))
        .collect();
    ImageTensor::new(base.height(), base.width(), data)
}

/// Elementwise clamp of every gradient value to `[-tau, tau]`, or a global
/// L2 rescale onto the tau sphere in global-norm mode.
pub fn clip_grad(grads: &GradMap, tau: f64, mode: ClipMode) -> GradMap {
    match mode {
        ClipMode::Elementwise => grads
            .iter()
            .map(|(name, t)| {
                let clipped: Vec<f64> = t.data().iter().map(|v| v.clamp(-tau, tau)).collect();
                (
                    name.clone(),
                    Tensor::new(t.shape().to_vec(), clipped).expect("clamp keeps values finite"),
                )
            })
            .collect(),
        ClipMode::GlobalNorm => {
            let sq: f64 = grads
                .values()
                .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            let scale = if norm > tau { tau / norm } else { 1.0 };
            grads
                .iter()
                .map(|(name, t)| {
                    let scaled: Vec<f64> = t.data().iter().map(|v| v * scale).collect();
                    (
                        name.clone(),
                        Tensor::new(t.shape().to_vec(), scaled).expect("rescale keeps values finite"),
                    )
                })
                .collect()
        }
    }
}

/// Fresh Gaussian-perturbed copy of the released parameters; per-tensor std
/// is `lambda * sigma * rms(tensor)`.
fn redraw_params(
    released: &VLMParams,
    lambda: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> VLMParams {
    let mut copy = released.clone();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for (_, entry) in copy.iter_mut() {
        let scale = lambda * sigma * entry.tensor.rms();
        for v in entry.tensor.data_mut() {
            *v += scale * unit.sample(rng);
        }
    }
    copy
}

/// Runs one attack and returns the bundle. Numeric failures (non-finite
/// loss, sustained divergence) are reported in the bundle, not as errors.
pub fn forge_trigger(
    released: &VLMParams,
    model_cfg: &ModelConfig,
    vocab: &Vocabulary,
    base: &ImageTensor,
    qa: &QaPair,
    cfg: &AttackConfig,
) -> Result<TriggerBundle> {
    cfg.validate()?;
    let question = qa.question_tokens(vocab)?;
    let answer = qa.answer_tokens(vocab)?;

    let mut bundle = TriggerBundle {
        question_text: qa.question.clone(),
        answer_text: qa.answer.clone(),
        question: question.clone(),
        answer: answer.clone(),
        base: base.clone(),
        trigger: base.clone(),
        config: *cfg,
        trace: Vec::with_capacity(cfg.steps),
        final_loss: 0.0,
        failed: false,
        failure: None,
        original_hit: None,
        clean_rarity: None,
        max_linf: 0.0,
        constraint_violations: 0,
        max_clipped_grad: 0.0,
    };

    let mut pixels: Vec<f64> = base.data().to_vec();
    let mut scratch = match cfg.method {
        AttackMethod::Pla => Some(released.clone()),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = match cfg.method {
        AttackMethod::Pla => TrainFilter::All,
        _ => TrainFilter::None,
    };

    let mut initial_loss = None;
    let mut high_loss_run = 0usize;
    for step in 0..cfg.steps {
        let image = ImageTensor::new(base.height(), base.width(), pixels.clone())?;

        let redrawn;
        let step_params: &VLMParams = match cfg.method {
            AttackMethod::Ordinary => released,
            AttackMethod::Rna => {
                redrawn = redraw_params(released, cfg.noise_lambda, cfg.noise_sigma, &mut rng);
                &redrawn
            }
            AttackMethod::Pla => scratch.as_ref().expect("scratch initialized for pla"),
        };

        let graph = forward_loss(step_params, model_cfg, &image, &question, &answer, &train, true);
        let mut graph = match graph {
            Ok(g) if g.loss.is_finite() => g,
            Ok(g) => {
                bundle.failed = true;
                bundle.failure = Some(format!("non-finite loss {} at step {step}", g.loss));
                break;
            }
            Err(Error::NonFinite(what)) => {
                bundle.failed = true;
                bundle.failure = Some(format!("non-finite forward value ({what}) at step {step}"));
                break;
            }
            Err(e) => return Err(e),
        };
        bundle.trace.push(graph.loss);

        let initial = *initial_loss.get_or_insert(graph.loss);
        if graph.loss > DIVERGENCE_FACTOR * initial.max(1e-3) {
            high_loss_run += 1;
            if high_loss_run >= DIVERGENCE_RUN {
                bundle.failed = true;
                bundle.failure = Some(format!(
                    "diverged: loss {:.4} above {DIVERGENCE_FACTOR}x initial {:.4} for {DIVERGENCE_RUN} consecutive steps (beta {} / clip_tau {})",
                    graph.loss, initial, cfg.beta, cfg.clip_tau
                ));
                break;
            }
        } else {
            high_loss_run = 0;
        }

        // One shared backward pass feeds both updates; the ascent is applied
        // before the pixel step but uses the same gradients.
        let grads = graph.tape.backprop(graph.root)?;
        if cfg.method == AttackMethod::Pla {
            let clipped = clip_grad(&grads.params, cfg.clip_tau, cfg.clip_mode);
            for t in clipped.values() {
                for &v in t.data() {
                    bundle.max_clipped_grad = bundle.max_clipped_grad.max(v.abs());
                }
            }
            scratch
                .as_mut()
                .expect("scratch initialized for pla")
                .apply_update(&clipped, cfg.beta)?;
        }

        let image_grad = grads
            .input("image")
            .expect("image registered as differentiable input");
        for (p, &g) in pixels.iter_mut().zip(image_grad.data()) {
            *p -= cfg.alpha * sign(g);
        }
        let projected = project_linf(&pixels, base, cfg.epsilon)?;
        pixels.copy_from_slice(projected.data());

        let dist = projected.linf_distance(base);
        bundle.max_linf = bundle.max_linf.max(dist);
        let in_range = projected.data().iter().all(|v| (0.0..=1.0).contains(v));
        if dist > cfg.epsilon * (1.0 + 1e-12) || !in_range {
            bundle.constraint_violations += 1;
        }
    }

    bundle.trigger = ImageTensor::new(base.height(), base.width(), pixels)?;
    bundle.final_loss = bundle.trace.last().copied().unwrap_or(0.0);
    Ok(bundle)
}

/// Flag A: the clean image does not elicit the target (rarity).
/// Flag B: the trigger image does (attack validity). Both are evaluated on
/// the released model through greedy decoding only.
pub fn validate_trigger(
    released: &VLMParams,
    model_cfg: &ModelConfig,
    bundle: &mut TriggerBundle,
) -> Result<(bool, bool)> {
    let max_len = bundle.answer.len() + DECODE_MARGIN;
    let clean = greedy_decode(released, model_cfg, &bundle.base, &bundle.question, max_len)?;
    let flag_a = !contains_subsequence(&clean, &bundle.answer);
    let triggered = greedy_decode(released, model_cfg, &bundle.trigger, &bundle.question, max_len)?;
    let flag_b = contains_subsequence(&triggered, &bundle.answer);
    bundle.clean_rarity = Some(flag_a);
    bundle.original_hit = Some(flag_b);
    Ok((flag_a, flag_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::init_model;

    fn setup() -> (VLMParams, ModelConfig, Vocabulary) {
        let cfg = ModelConfig::default();
        let params = init_model(&cfg).unwrap();
        let vocab = Vocabulary::closed(cfg.vocab_size).unwrap();
        (params, cfg, vocab)
    }

    fn attack_cfg(method: AttackMethod, steps: usize) -> AttackConfig {
        AttackConfig {
            method,
            steps,
            seed: 5,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn projection_examples() {
        let eps = 16.0 / 255.0;
        let base = ImageTensor::filled(2, 2, 0.5).unwrap();
        let out = project_linf(&[0.60; 12], &base, eps).unwrap();
        assert!((out.data()[0] - (0.5 + eps)).abs() < 1e-15);

        // identity on the base itself
        let out = project_linf(base.data(), &base, eps).unwrap();
        assert_eq!(out.data(), base.data());

        // ordered clamps: ball first, then [0,1]
        let low = ImageTensor::filled(2, 2, 0.01).unwrap();
        let out = project_linf(&[-0.2; 12], &low, eps).unwrap();
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn projection_shape_mismatch_rejected() {
        let base = ImageTensor::filled(2, 2, 0.5).unwrap();
        assert!(project_linf(&[0.5; 11], &base, 0.1).is_err());
    }

    #[test]
    fn clip_grad_examples() {
        let tau = 5e-3;
        let mut grads = GradMap::new();
        grads.insert(
            "w".into(),
            Tensor::new(vec![3], vec![0.01, -0.002, -0.7]).unwrap(),
        );
        let clipped = clip_grad(&grads, tau, ClipMode::Elementwise);
        assert_eq!(clipped["w"].data(), &[0.005, -0.002, -0.005]);
    }

    #[test]
    fn clip_grad_global_norm_caps_l2() {
        let mut grads = GradMap::new();
        grads.insert("a".into(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let clipped = clip_grad(&grads, 1.0, ClipMode::GlobalNorm);
        let norm: f64 = clipped["a"].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // inside the ball it is untouched
        let clipped = clip_grad(&grads, 10.0, ClipMode::GlobalNorm);
        assert_eq!(clipped["a"].data(), &[3.0, 4.0]);
    }

    #[test]
    fn sign_is_exact() {
        assert_eq!(sign(0.3), 1.0);
        assert_eq!(sign(-1e-300), -1.0);
        assert_eq!(sign(0.0), 0.0);
    }

    #[test]
    fn zero_steps_returns_base_bit_exact() {
        let (params, cfg, vocab) = setup();
        let base = ImageTensor::filled(16, 16, 0.5).unwrap();
        let qa = QaPair::new("Detecting copyright.", "ICLR Conference.");
        for method in AttackMethod::ALL {
            let bundle =
                forge_trigger(&params, &cfg, &vocab, &base, &qa, &attack_cfg(method, 0)).unwrap();
            assert_eq!(bundle.trigger, base);
            assert!(bundle.trace.is_empty());
        }
    }

    #[test]
    fn pixel_update_step_value() {
        // one signed step from 0.5 moves exactly alpha = 1/255 downhill
        let (params, cfg, vocab) = setup();
        let base = ImageTensor::filled(16, 16, 0.5).unwrap();
        let qa = QaPair::new("Please stop.", "I'm playing games.");
        let bundle = forge_trigger(
            &params,
            &cfg,
            &vocab,
            &base,
            &qa,
            &attack_cfg(AttackMethod::Ordinary, 1),
        )
        .unwrap();
        let step = 1.0 / 255.0;
        for (&t, &b) in bundle.trigger.data().iter().zip(base.data()) {
            let moved = (t - b).abs();
            assert!(
                moved == 0.0 || (moved - step).abs() < 1e-15,
                "pixel moved by {moved}"
            );
        }
        assert!(bundle
            .trigger
            .data()
            .iter()
            .zip(base.data())
            .any(|(&t, &b)| (t - b).abs() > 0.0));
    }

    #[test]
    fn rna_lambda_zero_is_bit_identical_to_ordinary() {
        let (params, cfg, vocab) = setup();
        let base = ImageTensor::filled(16, 16, 0.4).unwrap();
        let qa = QaPair::new("Exercise now!", "Time flies so fast.");
        let ordinary = forge_trigger(
            &params,
            &cfg,
            &vocab,
            &base,
            &qa,
            &attack_cfg(AttackMethod::Ordinary, 25),
        )
        .unwrap();
        let mut rna_cfg = attack_cfg(AttackMethod::Rna, 25);
        rna_cfg.noise_lambda = 0.0;
        let rna = forge_trigger(&params, &cfg, &vocab, &base, &qa, &rna_cfg).unwrap();
        assert_eq!(ordinary.trigger.data(), rna.trigger.data());
        for (a, b) in ordinary.trace.iter().zip(&rna.trace) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pla_beta_zero_is_bit_identical_to_ordinary() {
        let (params, cfg, vocab) = setup();
        let base = ImageTensor::filled(16, 16, 0.6).unwrap();
        let qa = QaPair::new("Are you all right?", "I don't like it.");
        let ordinary = forge_trigger(
            &params,
            &cfg,
            &vocab,
            &base,
            &qa,
            &attack_cfg(AttackMethod::Ordinary, 25),
        )
        .unwrap();
        let mut pla_cfg = attack_cfg(AttackMethod::Pla, 25);
        pla_cfg.beta = 0.0;
        let pla = forge_trigger(&params, &cfg, &vocab, &base, &qa, &pla_cfg).unwrap();
        assert_eq!(ordinary.trigger.data(), pla.trigger.data());
        for (a, b) in ordinary.trace.iter().zip(&pla.trace) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn released_store_untouched_by_all_methods() {
        let (params, cfg, vocab) = setup();
        let before = params.checksum();
        let base = ImageTensor::filled(16, 16, 0.5).unwrap();
        let qa = QaPair::new("Detecting copyright.", "ICLR Conference.");
        for method in AttackMethod::ALL {
            let _ = forge_trigger(&params, &cfg, &vocab, &base, &qa, &attack_cfg(method, 10))
                .unwrap();
            assert_eq!(params.checksum(), before);
        }
    }

    #[test]
    fn redrawn_noise_statistics() {
        // with unit-RMS entries the added noise std is lambda * sigma
        let (_, _, _) = setup();
        let mut store = VLMParams::new();
        let n = 100_000;
        store.insert(
            "w",
            crate::params::Group::Mlp,
            Tensor::from_fn(vec![n], |i| if i % 2 == 0 { 1.0 } else { -1.0 }),
        );
        let lambda = 1.0;
        let sigma = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let drawn = redraw_params(&store, lambda, sigma, &mut rng);
        let deltas: Vec<f64> = drawn
            .get("w")
            .unwrap()
            .data()
            .iter()
            .zip(store.get("w").unwrap().data())
            .map(|(a, b)| a - b)
            .collect();
        let mean: f64 = deltas.iter().sum::<f64>() / n as f64;
        let var: f64 = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let want = lambda * sigma;
        assert!(mean.abs() < 5.0 * want / (n as f64).sqrt(), "mean {mean}");
        assert!((std - want).abs() / want < 0.05, "std {std} vs {want}");
    }

    #[test]
    fn every_iterate_stays_in_ball_and_range() {
        let (params, cfg, vocab) = setup();
        let base = ImageTensor::filled(16, 16, 0.02).unwrap(); // near the floor
        let qa = QaPair::new("Please stop.", "I'm playing games.");
        let bundle = forge_trigger(
            &params,
            &cfg,
            &vocab,
            &base,
            &qa,
            &attack_cfg(AttackMethod::Pla, 60),
        )
        .unwrap();
        assert_eq!(bundle.constraint_violations, 0);
        assert!(bundle.max_linf <= 16.0 / 255.0 * (1.0 + 1e-12));
    }

    #[test]
    fn same_seed_same_bundle() {
        let (params, cfg, vocab) = setup();
        let base = ImageTensor::filled(16, 16, 0.35).unwrap();
        let qa = QaPair::new("Detecting copyright.", "ICLR Conference.");
        let a = forge_trigger(
            &params,
            &cfg,
            &vocab,
            &base,
            &qa,
            &attack_cfg(AttackMethod::Rna, 20),
        )
        .unwrap();
        let b = forge_trigger(
            &params,
            &cfg,
            &vocab,
            &base,
            &qa,
            &attack_cfg(AttackMethod::Rna, 20),
        )
        .unwrap();
        assert_eq!(a.trigger.data(), b.trigger.data());
        assert_eq!(a.trace, b.trace);
    }
}
