//! Every analytic gradient path is validated against central finite
//! differences of the summation oracle.

use biwkv::{
    biwkv_backward, biwkv_forward, wkv_forward_with, wkv_oracle_with, DecayParams, Directionality,
    KernelOptions, KvSequence,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

struct Instance {
    t: usize,
    c: usize,
    k: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
    u: Vec<f64>,
    gy: Vec<f64>,
}

impl Instance {
    fn random(t: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        Self {
            t,
            c,
            k: draw(t * c),
            v: draw(t * c),
            w: draw(c),
            u: draw(c),
            gy: draw(t * c),
        }
    }

    fn loss(&self, k: &[f64], v: &[f64], w: &[f64], u: &[f64], dir: Directionality) -> f64 {
        let seq = KvSequence::new(self.t, self.c, k.to_vec(), v.to_vec()).unwrap();
        let params = DecayParams::new(w.to_vec(), u.to_vec()).unwrap();
        let out = wkv_oracle_with(&seq, &params, dir).unwrap();
        out.iter().zip(&self.gy).map(|(y, g)| y * g).sum()
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_all(inst: &Instance, dir: Directionality, tol: f64) -> f64 {
    let seq = KvSequence::new(inst.t, inst.c, inst.k.clone(), inst.v.clone()).unwrap();
    let params = DecayParams::new(inst.w.clone(), inst.u.clone()).unwrap();
    let options = KernelOptions {
        direction: dir,
        ..KernelOptions::default()
    };
    let out = wkv_forward_with(&seq, &params, options).unwrap();
    let grads = biwkv_backward(&out.ctx, &inst.gy).unwrap();

    let mut worst: f64 = 0.0;
    let mut bump = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic, numeric));
    };

    for c in 0..inst.c {
        let mut wp = inst.w.clone();
        let mut wm = inst.w.clone();
        wp[c] += EPS;
        wm[c] -= EPS;
        bump(
            grads.gw[c],
            inst.loss(&inst.k, &inst.v, &wp, &inst.u, dir),
            inst.loss(&inst.k, &inst.v, &wm, &inst.u, dir),
        );
        let mut up = inst.u.clone();
        let mut um = inst.u.clone();
        up[c] += EPS;
        um[c] -= EPS;
        bump(
            grads.gu[c],
            inst.loss(&inst.k, &inst.v, &inst.w, &up, dir),
            inst.loss(&inst.k, &inst.v, &inst.w, &um, dir),
        );
    }
    for i in 0..inst.t * inst.c {
        let mut kp = inst.k.clone();
        let mut km = inst.k.clone();
        kp[i] += EPS;
        km[i] -= EPS;
        bump(
            grads.gk[i],
            inst.loss(&kp, &inst.v, &inst.w, &inst.u, dir),
            inst.loss(&km, &inst.v, &inst.w, &inst.u, dir),
        );
        let mut vp = inst.v.clone();
        let mut vm = inst.v.clone();
        vp[i] += EPS;
        vm[i] -= EPS;
        bump(
            grads.gv[i],
            inst.loss(&inst.k, &vp, &inst.w, &inst.u, dir),
            inst.loss(&inst.k, &vm, &inst.w, &inst.u, dir),
        );
    }
    assert!(worst < tol, "worst relative error {worst} over tolerance {tol}");
    worst
}

#[test]
fn matches_finite_differences_of_the_oracle() {
    for seed in 0..4 {
        check_all(
            &Instance::random(8, 4, seed),
            Directionality::Bidirectional,
            1e-6,
        );
    }
}

#[test]
fn causal_matches_finite_differences() {
    for seed in 0..4 {
        check_all(&Instance::random(8, 4, seed), Directionality::Causal, 1e-6);
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let inst = Instance::random(6, 3, 42);
    let seq = KvSequence::new(inst.t, inst.c, inst.k.clone(), inst.v.clone()).unwrap();
    let params = DecayParams::new(inst.w.clone(), inst.u.clone()).unwrap();
    let out = biwkv_forward(&seq, &params).unwrap();
    let grads = biwkv_backward(&out.ctx, &vec![0.0; inst.t * inst.c]).unwrap();
    assert!(grads.gw.iter().all(|&x| x == 0.0));
    assert!(grads.gu.iter().all(|&x| x == 0.0));
    assert!(grads.gk.iter().all(|&x| x == 0.0));
    assert!(grads.gv.iter().all(|&x| x == 0.0));
}

#[test]
fn single_token_gradients_are_degenerate() {
    // wkv_0 == v_0 exactly, independent of k, u and w.
    let inst = Instance::random(1, 5, 13);
    let seq = KvSequence::new(1, inst.c, inst.k.clone(), inst.v.clone()).unwrap();
    let params = DecayParams::new(inst.w.clone(), inst.u.clone()).unwrap();
    let out = biwkv_forward(&seq, &params).unwrap();
    let grads = biwkv_backward(&out.ctx, &inst.gy).unwrap();
    assert_eq!(grads.gv, inst.gy);
    assert!(grads.gk.iter().all(|&x| x == 0.0));
    assert!(grads.gu.iter().all(|&x| x == 0.0));
    assert!(grads.gw.iter().all(|&x| x == 0.0));
}

#[test]
fn rejects_non_finite_upstream_gradient() {
    let inst = Instance::random(4, 2, 1);
    let seq = KvSequence::new(inst.t, inst.c, inst.k.clone(), inst.v.clone()).unwrap();
    let params = DecayParams::new(inst.w.clone(), inst.u.clone()).unwrap();
    let out = biwkv_forward(&seq, &params).unwrap();
    let mut gy = inst.gy.clone();
    gy[3] = f64::INFINITY;
    assert!(biwkv_backward(&out.ctx, &gy).is_err());
}
