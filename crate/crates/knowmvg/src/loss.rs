//! Box losses, the phrase-identification loss, and the evaluation metrics.
//!
//! Everything exists twice where training needs it: a plain function over
//! concrete values (used by metrics and tests) and a graph builder over
//! [`Var`] handles (used by the training loss). The two share their
//! definitions through the same arithmetic, so the plain path doubles as a
//! readable statement of what the differentiable path computes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::Real;
use crate::numerics::tensor::Tensor;

/// Axis-aligned box, corners normalized to [0,1]. Zero-area boxes are
/// rejected at construction; every box that exists is usable in IoU math.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T = f64> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Real> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let zero = T::zero();
        let one = T::one();
        if !(x1 >= zero && y1 >= zero && x2 <= one && y2 <= one && x1 < x2 && y1 < y2) {
            return Err(Error::contract(format!(
                "invalid box ({x1:?},{y1:?},{x2:?},{y2:?}): need 0 ≤ lo < hi ≤ 1"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn from_corner_slice(v: &[T]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::contract("box slice must have 4 elements"));
        }
        BBox::new(v[0], v[1], v[2], v[3])
    }

    /// (cx, cy, w, h) form.
    pub fn to_cxcywh(&self) -> [T; 4] {
        let two = T::cast(2.0);
        [
            (self.x1 + self.x2) / two,
            (self.y1 + self.y2) / two,
            self.x2 - self.x1,
            self.y2 - self.y1,
        ]
    }

    pub fn area(&self) -> T {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn corners(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// IoU minus the normalized dead area of the smallest enclosing box.
pub fn giou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclose = ew * eh;
    inter / union - (enclose - union) / enclose
}

/// Mean binary cross-entropy of per-token phrase logits against 0/1 labels.
pub fn ce_phrase_loss<T: Real>(logits: &[T], labels: &[T]) -> Result<T> {
    if logits.len() != labels.len() {
        return Err(Error::contract(format!(
            "phrase loss: {} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::contract("phrase loss: empty inputs"));
    }
    let mut acc = T::zero();
    for (&x, &t) in logits.iter().zip(labels) {
        acc += x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p();
    }
    Ok(acc / T::from_usize(logits.len()).unwrap())
}

/// Smooth-ℓ1 (β = 1: quadratic inside |x| < 1) averaged over the 4
/// coordinates, plus the GIoU loss 1 − giou.
pub fn box_loss<T: Real>(pred: &BBox<T>, gold: &BBox<T>) -> (T, T) {
    let half = T::cast(0.5);
    let quarter = T::cast(0.25);
    let mut l1 = T::zero();
    for (p, g) in pred.corners().into_iter().zip(gold.corners()) {
        let x = p - g;
        l1 += if x.abs() < T::one() {
            half * x * x
        } else {
            x.abs() - half
        };
    }
    (l1 * quarter, T::one() - giou(pred, gold))
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossWeights {
    pub txt: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossWeights {
    pub fn unit() -> Self {
        LossWeights {
            txt: 1.0,
            l1: 1.0,
            giou: 1.0,
        }
    }
}

/// Per-step loss components. `l1` and `giou_loss` are stored after weighting
/// so the additive invariants hold for any weight choice; unit weights make
/// them bit-equal to the raw terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub txt: f64,
    pub l1: f64,
    pub giou_loss: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub total: f64,
}

pub fn total_loss(txt: f64, l1: f64, giou_loss: f64, w: &LossWeights) -> LossBreakdown {
    let txt = w.txt * txt;
    let l1 = w.l1 * l1;
    let giou_loss = w.giou * giou_loss;
    let box_loss = l1 + giou_loss;
    LossBreakdown {
        txt,
        l1,
        giou_loss,
        box_loss,
        total: txt + box_loss,
    }
}

// ---- graph builders (differentiable path) ----

/// Bind a concrete box as a constant 1×4 corner node.
pub fn box_input<T: Real>(g: &mut Graph<T>, b: &BBox<T>) -> Var {
    g.input(Tensor::row_vector(b.corners().to_vec()))
}

/// giou(pred, gold) over 1×4 corner nodes. Division is safe for valid boxes:
/// union ≥ max(area) > 0 and enclose ≥ union.
pub fn giou_var<T: Real>(g: &mut Graph<T>, pred: Var, gold: Var) -> Var {
    let coord = |g: &mut Graph<T>, v: Var, i: usize| g.slice_cols(v, i, i + 1);
    let (px1, py1, px2, py2) = (
        coord(g, pred, 0),
        coord(g, pred, 1),
        coord(g, pred, 2),
        coord(g, pred, 3),
    );
    let (gx1, gy1, gx2, gy2) = (
        coord(g, gold, 0),
        coord(g, gold, 1),
        coord(g, gold, 2),
        coord(g, gold, 3),
    );

    let ix2 = g.min_elem(px2, gx2);
    let ix1 = g.max_elem(px1, gx1);
    let iy2 = g.min_elem(py2, gy2);
    let iy1 = g.max_elem(py1, gy1);
    let iw0 = g.sub(ix2, ix1);
    let iw = g.max_const(iw0, T::zero());
    let ih0 = g.sub(iy2, iy1);
    let ih = g.max_const(ih0, T::zero());
    let inter = g.mul(iw, ih);

    let pw = g.sub(px2, px1);
    let ph = g.sub(py2, py1);
    let pa = g.mul(pw, ph);
    let gw = g.sub(gx2, gx1);
    let gh = g.sub(gy2, gy1);
    let ga = g.mul(gw, gh);
    let areas = g.add(pa, ga);
    let union = g.sub(areas, inter);

    let ex2 = g.max_elem(px2, gx2);
    let ex1 = g.min_elem(px1, gx1);
    let ey2 = g.max_elem(py2, gy2);
    let ey1 = g.min_elem(py1, gy1);
    let ew = g.sub(ex2, ex1);
    let eh = g.sub(ey2, ey1);
    let enclose = g.mul(ew, eh);

    let iou = g.div(inter, union);
    let dead = g.sub(enclose, union);
    let penalty = g.div(dead, enclose);
    g.sub(iou, penalty)
}

/// Mean smooth-ℓ1 over corner differences of two 1×4 nodes.
pub fn smooth_l1_var<T: Real>(g: &mut Graph<T>, pred: Var, gold: Var) -> Var {
    let diff = g.sub(pred, gold);
    let huber = g.smooth_l1(diff);
    g.mean_all(huber)
}

/// Weighted total: w_txt·txt + w_l1·l1 + w_giou·(1 − giou). Returns the
/// total plus the three weighted component nodes for logging.
pub fn total_loss_var<T: Real>(
    g: &mut Graph<T>,
    txt: Var,
    l1: Var,
    giou_loss: Var,
    w: &LossWeights,
) -> (Var, [Var; 3]) {
    let txt = g.scale(txt, T::cast(w.txt));
    let l1 = g.scale(l1, T::cast(w.l1));
    let gl = g.scale(giou_loss, T::cast(w.giou));
    let box_term = g.add(l1, gl);
    let total = g.add(txt, box_term);
    (total, [txt, l1, gl])
}

// ---- metrics ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub ap10: f64,
    pub ap30: f64,
    pub ap50: f64,
    pub per_sample_iou: Vec<f64>,
}

/// Per-sample IoU, mean IoU, and threshold accuracies. AP thresholds are
/// strict: a sample at exactly the threshold counts as a miss.
pub fn evaluate<T: Real>(preds: &[BBox<T>], golds: &[BBox<T>]) -> Result<EvalReport> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "evaluate: {} predictions vs {} golds (need equal, ≥ 1)",
            preds.len(),
            golds.len()
        )));
    }
    let per_sample_iou: Vec<f64> = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| iou(p, g).as_f64())
        .collect();
    let n = per_sample_iou.len() as f64;
    let frac_above = |t: f64| per_sample_iou.iter().filter(|&&x| x > t).count() as f64 / n;
    Ok(EvalReport {
        miou: per_sample_iou.iter().sum::<f64>() / n,
        ap10: frac_above(0.1),
        ap30: frac_above(0.3),
        ap50: frac_above(0.5),
        per_sample_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(0.2, 0.2, 0.2, 0.5).is_err()); // zero width
        assert!(BBox::new(0.5, 0.2, 0.4, 0.5).is_err()); // inverted
        assert!(BBox::new(-0.1, 0.0, 0.5, 0.5).is_err()); // out of range
    }

    #[test]
    fn identical_boxes_have_unit_overlap() {
        let a = bb(0.1, 0.3, 0.6, 0.9);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(giou(&a, &a), 1.0);
    }

    #[test]
    fn half_overlap_pair_gives_one_third() {
        // Intersection .125, union .375 → IoU 1/3; enclosing box equals the
        // union's bounding region, so GIoU = IoU.
        let a = bb(0.0, 0.0, 0.5, 0.5);
        let b = bb(0.25, 0.0, 0.75, 0.5);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((giou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn far_disjoint_corner_boxes() {
        // iou 0, union .02, enclose 1 → giou = −0.98.
        let a = bb(0.0, 0.0, 0.1, 0.1);
        let b = bb(0.9, 0.9, 1.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert!((giou(&a, &b) + 0.98).abs() < 1e-9);
    }

    #[test]
    fn giou_never_exceeds_iou_and_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let mut sample = || {
                let x1: f64 = rng.random_range(0.0..0.8);
                let y1: f64 = rng.random_range(0.0..0.8);
                let x2 = rng.random_range(x1 + 0.05..1.0);
                let y2 = rng.random_range(y1 + 0.05..1.0);
                bb(x1, y1, x2, y2)
            };
            let (a, b) = (sample(), sample());
            assert!(giou(&a, &b) <= iou(&a, &b) + 1e-12);
            assert_eq!(giou(&a, &b), giou(&b, &a));
            assert_eq!(iou(&a, &b), iou(&b, &a));
            assert!(giou(&a, &b) > -1.0 && giou(&a, &b) <= 1.0);
        }
    }

    #[test]
    fn phrase_loss_limits() {
        // Confident correct logits → near zero.
        let loss = ce_phrase_loss(&[10.0, -10.0, 10.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(loss < 1e-3);
        // Zero logit → ln 2 per token.
        let loss = ce_phrase_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce_phrase_loss(&[0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn phrase_loss_matches_straight_line_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<f64> = (0..16).map(|_| f64::from(rng.random_range(0..2))).collect();
        // oracle: p = 1/(1+e^-x); −[t ln p + (1−t) ln(1−p)]
        let want = logits
            .iter()
            .zip(&labels)
            .map(|(&x, &t)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 16.0;
        let got = ce_phrase_loss(&logits, &labels).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn box_loss_hand_values() {
        let a = bb(0.2, 0.2, 0.6, 0.6);
        assert_eq!(box_loss(&a, &a), (0.0, 0.0));
        // all four corner diffs exactly 0.5 → quadratic branch → 0.125
        let p = bb(0.5, 0.5, 1.0, 1.0);
        let g = bb(0.0, 0.0, 0.5, 0.5);
        let (l1, _) = box_loss(&p, &g);
        assert!((l1 - 0.125).abs() < 1e-12);
    }

    #[test]
    fn breakdown_is_additive() {
        let b = total_loss(0.3, 0.1, 0.2, &LossWeights::unit());
        assert!((b.box_loss - 0.3).abs() < 1e-15);
        assert!((b.total - 0.6).abs() < 1e-15);
        let z = total_loss(0.0, 0.0, 0.0, &LossWeights::unit());
        assert_eq!(z.total, 0.0);
        // unit weights bit-equal to the raw path
        assert_eq!(b.txt, 0.3);
        assert_eq!(b.l1, 0.1);
        assert_eq!(b.giou_loss, 0.2);
    }

    #[test]
    fn graph_giou_matches_plain_function() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let mut sample = || {
                let x1: f64 = rng.random_range(0.0..0.7);
                let y1: f64 = rng.random_range(0.0..0.7);
                let x2 = rng.random_range(x1 + 0.1..1.0);
                let y2 = rng.random_range(y1 + 0.1..1.0);
                bb(x1, y1, x2, y2)
            };
            let (a, b) = (sample(), sample());
            let mut g = Graph::new();
            let pa = box_input(&mut g, &a);
            let pb = box_input(&mut g, &b);
            let gv = giou_var(&mut g, pa, pb);
            assert!((g.scalar_value(gv) - giou(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_box_loss_gradient_matches_central_difference() {
        // generic point away from min/max kinks and the smooth-l1 boundary
        let gold = bb(0.3, 0.4, 0.7, 0.8);
        let pred0 = [0.25, 0.3, 0.8, 0.95];
        let f = |p: &[f64; 4]| {
            let mut g = Graph::<f64>::new();
            let pv = g.leaf(Tensor::row_vector(p.to_vec()), true);
            let gv = box_input(&mut g, &gold);
            let l1 = smooth_l1_var(&mut g, pv, gv);
            let gi = giou_var(&mut g, pv, gv);
            let one_minus = g.scale(gi, -1.0);
            let gl = g.add_const(one_minus, 1.0);
            let total = g.add(l1, gl);
            let grads = g.backward(total);
            (g.scalar_value(total), grads.get(pv).unwrap().clone())
        };
        let (_, analytic) = f(&pred0);
        let h = 1e-6;
        for i in 0..4 {
            let mut lo = pred0;
            let mut hi = pred0;
            lo[i] -= h;
            hi[i] += h;
            let numeric = (f(&hi).0 - f(&lo).0) / (2.0 * h);
            let a = analytic[(0, i)];
            assert!(
                (a - numeric).abs() < 1e-6 + 1e-5 * numeric.abs(),
                "coord {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn evaluate_matches_hand_computed_report() {
        // Target ious [0.6, 0.4, 0.05]: nested boxes with matching widths
        // give iou = area ratio exactly.
        let gold = bb(0.0, 0.0, 0.5, 0.5); // area 0.25
        let p60 = bb(0.0, 0.0, 0.5, 0.3); // 0.15/0.25 = 0.6
        let p40 = bb(0.0, 0.0, 0.5, 0.2); // 0.4
        let p05 = bb(0.0, 0.0, 0.5, 0.025); // 0.05
        let report = evaluate(&[p60, p40, p05], &[gold, gold, gold]).unwrap();
        assert!((report.miou - 0.35).abs() < 1e-12);
        assert!((report.ap50 - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.ap30 - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.ap10 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_predictions_score_perfectly() {
        let g = vec![bb(0.1, 0.1, 0.4, 0.4), bb(0.5, 0.5, 0.9, 0.8)];
        let report = evaluate(&g, &g).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!((report.ap10, report.ap30, report.ap50), (1.0, 1.0, 1.0));
    }

    #[test]
    fn threshold_is_strict() {
        // iou exactly 0.5: nested half-area box, dyadic coords so the ratio
        // is exact in floating point
        let gold = bb(0.0, 0.0, 0.5, 0.5);
        let pred = bb(0.0, 0.0, 0.5, 0.25);
        assert_eq!(iou(&pred, &gold), 0.5);
        let report = evaluate(&[pred], &[gold]).unwrap();
        assert_eq!(report.ap50, 0.0);
        assert_eq!(report.ap30, 1.0);
    }

    #[test]
    fn ap_ordering_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let mut sample = || {
                let x1: f64 = rng.random_range(0.0..0.8);
                let y1: f64 = rng.random_range(0.0..0.8);
                let x2 = rng.random_range(x1 + 0.05..1.0);
                let y2 = rng.random_range(y1 + 0.05..1.0);
                bb(x1, y1, x2, y2)
            };
            let preds: Vec<_> = (0..n).map(|_| sample()).collect();
            let golds: Vec<_> = (0..n).map(|_| sample()).collect();
            let r = evaluate(&preds, &golds).unwrap();
            assert!(r.ap10 >= r.ap30 && r.ap30 >= r.ap50);
        }
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let r = evaluate(&[bb(0.1, 0.1, 0.5, 0.5)], &[bb(0.1, 0.1, 0.5, 0.5)]).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["ap10", "ap30", "ap50", "miou", "per_sample_iou"]);
    }
}
