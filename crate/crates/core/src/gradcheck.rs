//! Finite-difference verification for every tape primitive.
//!
//! Each check rebuilds the same graph from a `ParamStore`, runs `backprop`
//! and compares against `finite_difference_gradient`. Used by the unit tests
//! and by the acceptance suite over many random configurations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Group, ParamStore};
use crate::tape::{finite_difference_gradient, grad_rel_err, Tape, ValueId};
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

/// Uniform magnitudes in [0.1, 1.1) with random sign, clear of the ReLU kink.
fn random_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = 0.1 + rng.random::<f64>();
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

/// Runs one graph both ways and returns the worst relative error over all
/// parameter coordinates.
fn check<F>(store: &ParamStore, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, store)?;
    let grads = tape.backprop(root)?;

    let fd = finite_difference_gradient(
        |p| {
            let mut t = Tape::new();
            let r = build(&mut t, p)?;
            Ok(t.scalar_value(r))
        },
        store,
        FD_STEP,
    )?;

    let mut worst: f64 = 0.0;
    for (name, fd_grad) in &fd {
        let ad_grad = grads
            .param(name)
            .unwrap_or_else(|| panic!("missing backprop gradient for {name}"));
        for (&a, &f) in ad_grad.data().iter().zip(fd_grad.data()) {
            worst = worst.max(grad_rel_err(a, f));
        }
    }
    Ok(worst)
}

/// Projects a matrix-valued node down to a scalar against a fixed random
/// probe so upstream gradients are non-uniform.
fn probe_to_scalar(tape: &mut Tape, v: ValueId, probe: &Tensor) -> Result<ValueId> {
    let c = tape.constant(probe.clone());
    let prod = tape.mul(v, c)?;
    tape.sum(prod)
}

macro_rules! one_param {
    ($store:ident, $name:literal, $tensor:expr) => {{
        $store.insert($name, Group::Mlp, $tensor);
    }};
}

/// Finite-difference check of every primitive operator at one random
/// configuration. Returns the maximum relative error observed.
pub fn check_primitives(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let m = 2 + (rng.random::<u32>() % 3) as usize;
    let k = 2 + (rng.random::<u32>() % 3) as usize;
    let n = 2 + (rng.random::<u32>() % 3) as usize;

    // matmul
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![m, k], 1.0));
        one_param!(s, "b", random_tensor(&mut rng, vec![k, n], 1.0));
        let probe = random_tensor(&mut rng, vec![m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let b = t.param("b", p.get("b")?.clone());
            let out = t.matmul(a, b)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // matmul_nt
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![m, k], 1.0));
        one_param!(s, "b", random_tensor(&mut rng, vec![n, k], 1.0));
        let probe = random_tensor(&mut rng, vec![m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let b = t.param("b", p.get("b")?.clone());
            let out = t.matmul_nt(a, b)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // add + mul
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![m, n], 1.0));
        one_param!(s, "b", random_tensor(&mut rng, vec![m, n], 1.0));
        let probe = random_tensor(&mut rng, vec![m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let b = t.param("b", p.get("b")?.clone());
            let summed = t.add(a, b)?;
            let out = t.mul(summed, b)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // add_bias + scale
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![m, n], 1.0));
        one_param!(s, "bias", random_tensor(&mut rng, vec![n], 1.0));
        let probe = random_tensor(&mut rng, vec![m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let b = t.param("bias", p.get("bias")?.clone());
            let biased = t.add_bias(a, b)?;
            let out = t.scale(biased, 0.7)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // relu, off the kink
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor_off_kink(&mut rng, vec![m, n]));
        let probe = random_tensor(&mut rng, vec![m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let out = t.relu(a)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // gelu
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![m, n], 2.0));
        let probe = random_tensor(&mut rng, vec![m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let out = t.gelu(a)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // row softmax, plain and causal
    for causal in [false, true] {
        let rows = if causal { n } else { m };
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![rows, n], 2.0));
        let probe = random_tensor(&mut rng, vec![rows, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let out = t.row_softmax(a, causal)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // layer norm
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![m, n], 1.5));
        one_param!(s, "gain", random_tensor(&mut rng, vec![n], 1.0));
        one_param!(s, "bias", random_tensor(&mut rng, vec![n], 1.0));
        let probe = random_tensor(&mut rng, vec![m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let gain = t.param("gain", p.get("gain")?.clone());
            let bias = t.param("bias", p.get("bias")?.clone());
            let out = t.layer_norm(a, gain, bias)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // embedding lookup, with a repeated id to exercise accumulation
    {
        let vocab = 5;
        let ids: Vec<u32> = vec![
            rng.random_range(0..vocab as u32),
            rng.random_range(0..vocab as u32),
            0,
            0,
        ];
        let mut s = ParamStore::new();
        one_param!(s, "table", random_tensor(&mut rng, vec![vocab, n], 1.0));
        let probe = random_tensor(&mut rng, vec![ids.len(), n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let table = t.param("table", p.get("table")?.clone());
            let out = t.embed(table, &ids)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // concat rows/cols + slice cols
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![m, n], 1.0));
        one_param!(s, "b", random_tensor(&mut rng, vec![m, n], 1.0));
        let probe_rows = random_tensor(&mut rng, vec![2 * m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let b = t.param("b", p.get("b")?.clone());
            let out = t.concat_rows(a, b)?;
            probe_to_scalar(t, out, &probe_rows)
        })?);
        let probe_cols = random_tensor(&mut rng, vec![m, n], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            let b = t.param("b", p.get("b")?.clone());
            let wide = t.concat_cols(a, b)?;
            let out = t.slice_cols(wide, n / 2, n)?;
            probe_to_scalar(t, out, &probe_cols)
        })?);
    }

    // patchify
    {
        let mut s = ParamStore::new();
        one_param!(s, "img", random_tensor(&mut rng, vec![3, 4, 4], 0.5));
        let probe = random_tensor(&mut rng, vec![4, 12], 1.0);
        worst = worst.max(check(&s, |t, p| {
            let img = t.param("img", p.get("img")?.clone());
            let out = t.patchify(img, 2)?;
            probe_to_scalar(t, out, &probe)
        })?);
    }

    // cross-entropy (already scalar)
    {
        let v = 6;
        let rows = m.max(3);
        let positions: Vec<usize> = vec![0, rows - 1, rows / 2];
        let targets: Vec<u32> = (0..3).map(|_| rng.random_range(0..v as u32)).collect();
        let mut s = ParamStore::new();
        one_param!(s, "logits", random_tensor(&mut rng, vec![rows, v], 2.0));
        worst = worst.max(check(&s, |t, p| {
            let logits = t.param("logits", p.get("logits")?.clone());
            t.cross_entropy(logits, &positions, &targets)
        })?);
    }

    // plain sum
    {
        let mut s = ParamStore::new();
        one_param!(s, "a", random_tensor(&mut rng, vec![m, n], 1.0));
        worst = worst.max(check(&s, |t, p| {
            let a = t.param("a", p.get("a")?.clone());
            t.sum(a)
        })?);
    }

    Ok(worst)
}
