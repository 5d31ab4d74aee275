//! LoRA and DoRA projections. Weights are stored `[out, in]` and applied to
//! row-vector activations, so `W·h` is `h·Wᵀ` here.

use serde::{Deserialize, Serialize};

use super::AdaptationConfig;
use crate::backbone::Graph;
use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMethod {
    #[default]
    Lora,
    Dora,
}

/// How the DoRA weight is assembled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoraForm {
    /// `m ⊙ (W + sBA) / ‖W + sBA‖`, the identity when `B = 0`.
    #[default]
    Canonical,
    /// `W / ‖W‖ + sBA`; does not reproduce `W` at zero delta.
    PaperLiteral,
}

fn check_pair<E: Real>(tape: &Tape<E>, w: Var, a: Var, b: Var) -> Result<(usize, usize, usize)> {
    let (ws, as_, bs) = (tape.shape(w), tape.shape(a), tape.shape(b));
    if ws.len() != 2 || as_.len() != 2 || bs.len() != 2 {
        return Err(Error::shape("low-rank pair", "matrices expected"));
    }
    let (out, inp, r) = (ws[0], ws[1], as_[0]);
    if as_[1] != inp || bs != [out, r] {
        return Err(Error::shape(
            "low-rank pair",
            format!("W {ws:?}, A {as_:?}, B {bs:?}: rank mismatch"),
        ));
    }
    Ok((out, inp, r))
}

/// `h·Wᵀ + s·(h·Aᵀ)·Bᵀ`, never forming `W + sBA`.
pub fn lora_linear<E: Real>(tape: &mut Tape<E>, h: Var, w: Var, a: Var, b: Var, s: E) -> Result<Var> {
    check_pair(tape, w, a, b)?;
    let base = tape.matmul_t(h, w)?;
    let low = tape.matmul_t(h, a)?;
    let low = tape.matmul_t(low, b)?;
    let low = tape.scale(low, s)?;
    tape.add(base, low)
}

/// Euclidean norm of every row of a `[out, in]` matrix.
pub fn row_norms<E: Real>(tape: &mut Tape<E>, w: Var) -> Result<Var> {
    let sq = tape.square(w)?;
    let sums = tape.sum_cols(sq)?;
    tape.sqrt(sums)
}

/// The adapted DoRA weight `[out, in]`; `m` has one entry per output unit.
pub fn dora_weight<E: Real>(tape: &mut Tape<E>, w: Var, a: Var, b: Var, m: Var, s: E, form: DoraForm) -> Result<Var> {
    let (out, _, _) = check_pair(tape, w, a, b)?;
    if tape.value(m).len() != out {
        return Err(Error::shape("dora", format!("magnitude {:?} for {out} outputs", tape.shape(m))));
    }
    let delta = tape.matmul(b, a)?;
    let delta = tape.scale(delta, s)?;
    match form {
        DoraForm::Canonical => {
            let v = tape.add(w, delta)?;
            let n = row_norms(tape, v)?;
            if tape.value(n).iter().any(|&x| x == E::ZERO) {
                return Err(Error::invalid("DoRA direction has a zero-norm row"));
            }
            let ratio = tape.div(m, n)?;
            tape.mul_col(v, ratio)
        }
        DoraForm::PaperLiteral => {
            let n = row_norms(tape, w)?;
            if tape.value(n).iter().any(|&x| x == E::ZERO) {
                return Err(Error::invalid("weight has a zero-norm row"));
            }
            let ones = tape.constant(crate::tensor::Tensor::full([out], E::ONE));
            let inv = tape.div(ones, n)?;
            let dir = tape.mul_col(w, inv)?;
            tape.add(dir, delta)
        }
    }
}

pub fn dora_linear<E: Real>(
    tape: &mut Tape<E>,
    h: Var,
    w: Var,
    a: Var,
    b: Var,
    m: Var,
    s: E,
    form: DoraForm,
) -> Result<Var> {
    let wp = dora_weight(tape, w, a, b, m, s, form)?;
    tape.matmul_t(h, wp)
}

/// Projection `{prefix}` with its low-rank update, plus bias.
pub fn adapted_projection<E: Real>(g: &mut Graph<E>, prefix: &str, x: Var, cfg: &AdaptationConfig) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    let a = g.param(&format!("{prefix}.lora_a"))?;
    let b = g.param(&format!("{prefix}.lora_b"))?;
    let s = E::from_f64(cfg.scale());
    let y = match cfg.method {
        PeftMethod::Lora => lora_linear(g.tape, x, w, a, b, s)?,
        PeftMethod::Dora => {
            let m = g.param(&format!("{prefix}.dora_m"))?;
            dora_linear(g.tape, x, w, a, b, m, s, cfg.dora_form)?
        }
    };
    g.tape.add_row(y, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, Rng, Tensor};

    fn mat(tape: &mut Tape<f64>, shape: [usize; 2], v: &[f64]) -> Var {
        tape.constant(Tensor::new(shape, v.to_vec()).unwrap())
    }

    #[test]
    fn lora_hand_example() {
        let mut tape = Tape::new();
        let w = mat(&mut tape, [2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = mat(&mut tape, [1, 2], &[1.0, 0.0]);
        let b = mat(&mut tape, [2, 1], &[1.0, 0.0]);
        let h = mat(&mut tape, [1, 2], &[3.0, 5.0]);
        let y = lora_linear(&mut tape, h, w, a, b, 1.0).unwrap();
        assert_eq!(tape.value(y), &[6.0, 5.0]);

        // dense oracle: h·(W + BA)ᵀ
        let dense = [2.0, 0.0, 0.0, 1.0];
        let expect = [3.0 * dense[0] + 5.0 * dense[1], 3.0 * dense[2] + 5.0 * dense[3]];
        assert_eq!(tape.value(y), &expect);
    }

    #[test]
    fn lora_zero_b_is_exact() {
        let mut rng = Rng::new(5);
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(Tensor::randn([6, 6], 0.5, &mut rng));
        let a = tape.constant(Tensor::randn([2, 6], 0.02, &mut rng));
        let b = tape.constant(Tensor::zeros([6, 2]));
        let h = tape.constant(Tensor::randn([4, 6], 1.0, &mut rng));
        let plain = tape.matmul_t(h, w).unwrap();
        let y = lora_linear(&mut tape, h, w, a, b, 2.0).unwrap();
        assert_eq!(tape.value(y), tape.value(plain));
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::zeros([3, 3]));
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 1]));
        let h = tape.constant(Tensor::zeros([1, 3]));
        assert!(matches!(lora_linear(&mut tape, h, w, a, b, 1.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(seed);
            let w = Tensor::<f64>::randn([4, 3], 0.7, &mut rng);
            let b = Tensor::<f64>::randn([4, 2], 0.3, &mut rng);
            let h = Tensor::<f64>::randn([5, 3], 1.0, &mut rng);
            let a0 = Tensor::<f64>::randn([2, 3], 0.5, &mut rng);
            let err = finite_difference_check(
                |tape, a| {
                    let (w, b, h) = (tape.constant(w.clone()), tape.constant(b.clone()), tape.constant(h.clone()));
                    let y = lora_linear(tape, h, w, a, b, 1.5)?;
                    let y = tape.square(y)?;
                    tape.sum(y)
                },
                &a0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: A error {err}");
            let err = finite_difference_check(
                |tape, b| {
                    let (w, a, h) = (tape.constant(w.clone()), tape.constant(a0.clone()), tape.constant(h.clone()));
                    let y = lora_linear(tape, h, w, a, b, 1.5)?;
                    let y = tape.square(y)?;
                    tape.sum(y)
                },
                &b,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: B error {err}");
        }
    }

    #[test]
    fn dora_canonical_identity_and_norms() {
        let mut rng = Rng::new(9);
        let mut tape = Tape::<f64>::new();
        let wt = Tensor::randn([5, 4], 1.0, &mut rng);
        let w = tape.constant(wt.clone());
        let m = row_norms(&mut tape, w).unwrap();
        let a = tape.constant(Tensor::randn([2, 4], 0.02, &mut rng));
        let b = tape.constant(Tensor::zeros([5, 2]));
        let wp = dora_weight(&mut tape, w, a, b, m, 2.0, DoraForm::Canonical).unwrap();
        assert_eq!(tape.value(wp), wt.data());

        let b = tape.constant(Tensor::randn([5, 2], 0.5, &mut rng));
        let m = tape.constant(Tensor::new([5], vec![0.5, 1.0, 2.0, 3.0, 0.1]).unwrap());
        let wp = dora_weight(&mut tape, w, a, b, m, 2.0, DoraForm::Canonical).unwrap();
        let n = row_norms(&mut tape, wp).unwrap();
        for (x, y) in tape.value(n).iter().zip(tape.value(m)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dora_matches_dense_recomputation() {
        // d = 2, r = 1
        let (w, a, b, m, s) = ([1.0, 2.0, -1.0, 0.5], [0.3, -0.2], [1.0, 2.0], [2.0, 1.0], 0.5);
        let h = [1.0, -1.0];
        let mut v = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                v[i * 2 + j] = w[i * 2 + j] + s * b[i] * a[j];
            }
        }
        let mut expect = [0.0; 2];
        for i in 0..2 {
            let n = (v[i * 2] * v[i * 2] + v[i * 2 + 1] * v[i * 2 + 1]).sqrt();
            expect[i] = m[i] / n * (v[i * 2] * h[0] + v[i * 2 + 1] * h[1]);
        }
        let mut tape = Tape::<f64>::new();
        let wv = mat(&mut tape, [2, 2], &w);
        let av = mat(&mut tape, [1, 2], &a);
        let bv = mat(&mut tape, [2, 1], &b);
        let mv = tape.constant(Tensor::new([2], m.to_vec()).unwrap());
        let hv = mat(&mut tape, [1, 2], &h);
        let y = dora_linear(&mut tape, hv, wv, av, bv, mv, s, DoraForm::Canonical).unwrap();
        for (x, e) in tape.value(y).iter().zip(expect) {
            assert!((x - e).abs() < 1e-14);
        }

        let y = dora_linear(&mut tape, hv, wv, av, bv, mv, s, DoraForm::PaperLiteral).unwrap();
        for i in 0..2 {
            let n = (w[i * 2] * w[i * 2] + w[i * 2 + 1] * w[i * 2 + 1]).sqrt();
            let row = [w[i * 2] / n + s * b[i] * a[0], w[i * 2 + 1] / n + s * b[i] * a[1]];
            let e = row[0] * h[0] + row[1] * h[1];
            assert!((tape.value(y)[i] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn dora_rejects_zero_rows() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::zeros([2, 2]));
        let a = tape.constant(Tensor::zeros([1, 2]));
        let b = tape.constant(Tensor::zeros([2, 1]));
        let m = tape.constant(Tensor::full([2], 1.0));
        assert!(dora_weight(&mut tape, w, a, b, m, 1.0, DoraForm::Canonical).is_err());
    }
}
