//! Training objectives over matching scores.
//!
//! Margin losses over the tier chains `ground truth > retrieval > random`,
//! `ground truth > generation > random` and `ground truth > random`:
//!
//! ```text
//! L_Ran = h(s_r, s_rand)
//! L_Ret = h(s_r, s_e) + h(s_e, s_rand)
//! L_Gen = h(s_r, s_g) + h(s_g, s_rand)
//! L_Uni = L_Ran + L_Ret + L_Gen
//! h(hi, lo) = max(0, μ - hi + lo)
//! ```
//!
//! When a tier-2 list has several members, its loss is averaged over them.
//! Empty tier-2 lists contribute nothing. Every loss carries its exact
//! (sub)gradient with respect to each input score; a hinge is inactive when
//! its argument is exactly zero.

/// Loss value plus its partial derivative with respect to every score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub d_positive: f64,
    pub d_retrieval: Vec<f64>,
    pub d_generation: Vec<f64>,
    /// Random negatives (or, for flat/BCE losses, every negative).
    pub d_negatives: Vec<f64>,
}

impl LossValue {
    fn sized(retrieval: usize, generation: usize, negatives: usize) -> Self {
        LossValue {
            value: 0.0,
            d_positive: 0.0,
            d_retrieval: vec![0.0; retrieval],
            d_generation: vec![0.0; generation],
            d_negatives: vec![0.0; negatives],
        }
    }

    /// Sum of two losses over the same scores. Partial lists are added
    /// elementwise; a shorter (empty) list counts as zeros.
    pub fn plus(&self, other: &LossValue) -> LossValue {
        fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
            let n = a.len().max(b.len());
            (0..n)
                .map(|i| a.get(i).copied().unwrap_or(0.0) + b.get(i).copied().unwrap_or(0.0))
                .collect()
        }
        LossValue {
            value: self.value + other.value,
            d_positive: self.d_positive + other.d_positive,
            d_retrieval: add(&self.d_retrieval, &other.d_retrieval),
            d_generation: add(&self.d_generation, &other.d_generation),
            d_negatives: add(&self.d_negatives, &other.d_negatives),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hinge {
    pub value: f64,
    pub d_hi: f64,
    pub d_lo: f64,
}

/// `max(0, μ − s_hi + s_lo)`.
pub fn hinge(mu: f64, s_hi: f64, s_lo: f64) -> Hinge {
    let arg = mu - s_hi + s_lo;
    if arg > 0.0 {
        Hinge {
            value: arg,
            d_hi: -1.0,
            d_lo: 1.0,
        }
    } else {
        Hinge {
            value: 0.0,
            d_hi: 0.0,
            d_lo: 0.0,
        }
    }
}

pub fn loss_ran(mu: f64, s_r: f64, s_rand: f64) -> LossValue {
    let h = hinge(mu, s_r, s_rand);
    LossValue {
        value: h.value,
        d_positive: h.d_hi,
        d_retrieval: Vec::new(),
        d_generation: Vec::new(),
        d_negatives: vec![h.d_lo],
    }
}

/// Averaged chain loss `mean_i [h(s_r, s_mid_i) + h(s_mid_i, s_rand)]`;
/// returns (value, d_r, d_mid, d_rand).
fn chain(mu: f64, s_r: f64, mids: &[f64], s_rand: f64) -> (f64, f64, Vec<f64>, f64) {
    if mids.is_empty() {
        return (0.0, 0.0, Vec::new(), 0.0);
    }
    let scale = 1.0 / mids.len() as f64;
    let mut value = 0.0;
    let mut d_r = 0.0;
    let mut d_rand = 0.0;
    let mut d_mid = Vec::with_capacity(mids.len());
    for &s_mid in mids {
        let upper = hinge(mu, s_r, s_mid);
        let lower = hinge(mu, s_mid, s_rand);
        value += upper.value + lower.value;
        d_r += upper.d_hi;
        d_rand += lower.d_lo;
        d_mid.push((upper.d_lo + lower.d_hi) * scale);
    }
    (value * scale, d_r * scale, d_mid, d_rand * scale)
}

pub fn loss_ret(mu: f64, s_r: f64, s_e: &[f64], s_rand: f64) -> LossValue {
    let (value, d_r, d_e, d_rand) = chain(mu, s_r, s_e, s_rand);
    LossValue {
        value,
        d_positive: d_r,
        d_retrieval: d_e,
        d_generation: Vec::new(),
        d_negatives: vec![d_rand],
    }
}

pub fn loss_gen(mu: f64, s_r: f64, s_g: &[f64], s_rand: f64) -> LossValue {
    let (value, d_r, d_g, d_rand) = chain(mu, s_r, s_g, s_rand);
    LossValue {
        value,
        d_positive: d_r,
        d_retrieval: Vec::new(),
        d_generation: d_g,
        d_negatives: vec![d_rand],
    }
}

/// `L_Ran + L_Ret + L_Gen`, summed in that order.
pub fn loss_uni(mu: f64, s_r: f64, s_e: &[f64], s_g: &[f64], s_rand: f64) -> LossValue {
    loss_ran(mu, s_r, s_rand)
        .plus(&loss_ret(mu, s_r, s_e, s_rand))
        .plus(&loss_gen(mu, s_r, s_g, s_rand))
}

/// Single-margin loss with every grayscale response treated as a random
/// negative: `mean_n h(s_r, s_n)`.
pub fn loss_flat(mu: f64, s_r: f64, negatives: &[f64]) -> LossValue {
    let mut out = LossValue::sized(0, 0, negatives.len());
    if negatives.is_empty() {
        return out;
    }
    let scale = 1.0 / negatives.len() as f64;
    for (d, &s_n) in out.d_negatives.iter_mut().zip(negatives) {
        let h = hinge(mu, s_r, s_n);
        out.value += h.value;
        out.d_positive += h.d_hi * scale;
        *d = h.d_lo * scale;
    }
    out.value *= scale;
    out
}

/// Clamp applied to scores inside the log-loss.
pub const BCE_EPS: f64 = 1e-7;

/// Negated binary log-likelihood: `−[ln s_pos + mean_j ln(1 − s_neg_j)]`.
pub fn loss_bce(s_pos: f64, s_negs: &[f64]) -> LossValue {
    let clamp = |s: f64| s.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let pos = clamp(s_pos);
    let mut out = LossValue::sized(0, 0, s_negs.len());
    out.value = -pos.ln();
    out.d_positive = -1.0 / pos;
    if !s_negs.is_empty() {
        let scale = 1.0 / s_negs.len() as f64;
        let mut sum = 0.0;
        for (d, &s) in out.d_negatives.iter_mut().zip(s_negs) {
            let neg = clamp(s);
            sum += (1.0 - neg).ln();
            *d = scale / (1.0 - neg);
        }
        out.value -= sum * scale;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.3, 0.9, 0.2).value, 0.0);
        assert_abs_diff_eq!(hinge(0.3, 0.5, 0.4).value, 0.2, epsilon = 1e-12);
        let h = hinge(0.0, 0.4, 0.4);
        assert_eq!((h.value, h.d_hi, h.d_lo), (0.0, 0.0, 0.0));
        let h = hinge(0.3, 0.5, 0.4);
        assert_eq!((h.d_hi, h.d_lo), (-1.0, 1.0));
    }

    #[test]
    fn ran_examples() {
        assert_eq!(loss_ran(0.3, 0.9, 0.1).value, 0.0);
        assert_abs_diff_eq!(loss_ran(0.3, 0.6, 0.5).value, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(loss_ran(0.3, 0.1, 0.9).value, 1.1, epsilon = 1e-12);
    }

    #[test]
    fn ret_gen_examples() {
        assert_eq!(loss_ret(0.3, 0.9, &[0.6], 0.1).value, 0.0);
        assert_abs_diff_eq!(loss_ret(0.3, 0.6, &[0.55], 0.5).value, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(loss_ret(0.3, 0.6, &[0.2], 0.5).value, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(loss_gen(0.3, 0.6, &[0.55], 0.5).value, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(loss_gen(0.3, 0.6, &[0.2], 0.5).value, 0.6, epsilon = 1e-12);
        // Averaging over members.
        let both = loss_ret(0.3, 0.6, &[0.55, 0.2], 0.5);
        assert_abs_diff_eq!(both.value, 0.55, epsilon = 1e-12);
        assert_eq!(loss_ret(0.3, 0.6, &[], 0.5), loss_ret(0.3, 0.6, &[], 0.5));
        assert_eq!(loss_ret(0.3, 0.6, &[], 0.5).value, 0.0);
    }

    #[test]
    fn uni_examples() {
        assert_eq!(loss_uni(0.3, 0.9, &[0.6], &[0.5], 0.1).value, 0.0);
        assert_abs_diff_eq!(loss_uni(0.3, 0.6, &[0.55], &[0.2], 0.5).value, 1.3, epsilon = 1e-12);
        let no_ret = loss_uni(0.3, 0.6, &[], &[0.2], 0.5);
        let expect = loss_ran(0.3, 0.6, 0.5).value + loss_gen(0.3, 0.6, &[0.2], 0.5).value;
        assert_eq!(no_ret.value, expect);
        assert!(no_ret.d_retrieval.is_empty());
    }

    #[test]
    fn uni_partials_are_component_sums() {
        let l = loss_uni(0.3, 0.6, &[0.55, 0.1], &[0.2], 0.5);
        let ran = loss_ran(0.3, 0.6, 0.5);
        let ret = loss_ret(0.3, 0.6, &[0.55, 0.1], 0.5);
        let gen = loss_gen(0.3, 0.6, &[0.2], 0.5);
        assert_eq!(l.d_positive, ran.d_positive + ret.d_positive + gen.d_positive);
        assert_eq!(
            l.d_negatives[0],
            ran.d_negatives[0] + ret.d_negatives[0] + gen.d_negatives[0]
        );
        assert_eq!(l.d_retrieval, ret.d_retrieval);
        assert_eq!(l.d_generation, gen.d_generation);
    }

    #[test]
    fn flat_reduces_to_ran() {
        let single = loss_flat(0.3, 0.6, &[0.5]);
        assert_eq!(single, loss_ran(0.3, 0.6, 0.5));
        let many = loss_flat(0.3, 0.6, &[0.5, 0.1, 0.7]);
        let expect = (loss_ran(0.3, 0.6, 0.5).value + 0.0 + loss_ran(0.3, 0.6, 0.7).value) / 3.0;
        assert_abs_diff_eq!(many.value, expect, epsilon = 1e-15);
        assert_eq!(loss_flat(0.3, 0.6, &[]).value, 0.0);
    }

    #[test]
    fn bce_examples() {
        assert_abs_diff_eq!(loss_bce(0.5, &[0.5]).value, 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss_bce(0.5, &[0.5]).value, 1.38629, epsilon = 1e-5);
        assert!(loss_bce(1.0 - 1e-9, &[1e-9]).value < 1e-6);
        let l = loss_bce(0.9, &[0.1, 0.2]);
        assert_abs_diff_eq!(
            l.value,
            -(0.9f64.ln() + (0.9f64.ln() + 0.8f64.ln()) / 2.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(l.value, 0.269_612_549, epsilon = 1e-9);
        // Exact endpoints are clamped rather than producing infinities.
        assert!(loss_bce(0.0, &[1.0]).value.is_finite());
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn partials_match_finite_differences() {
        let (mu, r, e, g, n) = (0.3, 0.62, [0.51, 0.13], [0.44], 0.37);
        let l = loss_uni(mu, r, &e, &g, n);
        let f_r = |x: f64| loss_uni(mu, x, &e, &g, n).value;
        assert_abs_diff_eq!(l.d_positive, central(f_r, r), epsilon = 1e-6);
        let f_n = |x: f64| loss_uni(mu, r, &e, &g, x).value;
        assert_abs_diff_eq!(l.d_negatives[0], central(f_n, n), epsilon = 1e-6);
        for i in 0..e.len() {
            let f = |x: f64| {
                let mut ee = e;
                ee[i] = x;
                loss_uni(mu, r, &ee, &g, n).value
            };
            assert_abs_diff_eq!(l.d_retrieval[i], central(f, e[i]), epsilon = 1e-6);
        }
        let f_g = |x: f64| loss_uni(mu, r, &e, &[x], n).value;
        assert_abs_diff_eq!(l.d_generation[0], central(f_g, g[0]), epsilon = 1e-6);

        let b = loss_bce(0.7, &[0.2, 0.45]);
        assert_abs_diff_eq!(
            b.d_positive,
            central(|x| loss_bce(x, &[0.2, 0.45]).value, 0.7),
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            b.d_negatives[1],
            central(|x| loss_bce(0.7, &[0.2, x]).value, 0.45),
            epsilon = 1e-6
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hinge_losses_nonnegative(
                mu in 0.0f64..1.0,
                r in 0.0f64..1.0,
                e in prop::collection::vec(0.0f64..1.0, 0..6),
                g in prop::collection::vec(0.0f64..1.0, 0..6),
                n in 0.0f64..1.0,
            ) {
                let uni = loss_uni(mu, r, &e, &g, n);
                prop_assert!(uni.value >= 0.0);
                prop_assert!(loss_flat(mu, r, &e).value >= 0.0);
                let sum = loss_ran(mu, r, n).value + loss_ret(mu, r, &e, n).value + loss_gen(mu, r, &g, n).value;
                prop_assert_eq!(uni.value.to_bits(), sum.to_bits());
            }
        }
    }
}
