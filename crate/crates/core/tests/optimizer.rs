use rra_core::optim::Adam;
use rra_core::params::{ParamGroup, ParamStore};
use rra_tensor::{Graph, Tensor};

/// Adam written out step by step for a single scalar.
struct ScriptedAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScriptedAdam {
    fn update(&mut self, w: f64, grad: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * grad;
        self.v = 0.999 * self.v + 0.001 * grad * grad;
        let m_hat = self.m / (1.0 - 0.9f64.powi(self.t));
        let v_hat = self.v / (1.0 - 0.999f64.powi(self.t));
        w - lr * m_hat / (v_hat.sqrt() + 1e-8)
    }
}

/// `(w - target)²` summed over the entries of the single parameter.
fn quadratic_step(store: &mut ParamStore, adam: &mut Adam, target: f64, lr: f64) {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let t = g.constant(Tensor::full(store.get(store.find("w").unwrap()).value.shape(), target));
    let d = g.sub(vars[0], t).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    adam.step(store, &vars, &grads, lr).unwrap();
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    for grad_scale in [1e-3, 0.5, 7.0] {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(grad_scale / 2.0 + 1.0), ParamGroup::Classifier);
        let mut adam = Adam::new(&store);
        quadratic_step(&mut store, &mut adam, 1.0, 0.01);
        let w = store.iter().next().unwrap().value.item();
        let moved = grad_scale / 2.0 + 1.0 - w;
        // bias-corrected first step: lr · g / (|g| + eps)
        assert!((moved - 0.01 * grad_scale / (grad_scale + 1e-8)).abs() < 1e-12);
    }
}

#[test]
fn ten_steps_follow_scripted_reference() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::from_vec(vec![3.0, -2.0, 0.25]), ParamGroup::Classifier);
    let mut adam = Adam::new(&store);
    let mut refs: Vec<(f64, ScriptedAdam)> = [3.0, -2.0, 0.25]
        .into_iter()
        .map(|w| (w, ScriptedAdam { m: 0.0, v: 0.0, t: 0 }))
        .collect();
    for step in 0..10 {
        let lr = 0.1 / (1.0 + step as f64);
        quadratic_step(&mut store, &mut adam, 0.5, lr);
        for (w, r) in refs.iter_mut() {
            *w = r.update(*w, 2.0 * (*w - 0.5), lr);
        }
        let got = store.iter().next().unwrap().value.data().to_vec();
        for (a, (b, _)) in got.iter().zip(&refs) {
            assert!((a - b).abs() <= 1e-12, "step {step}: {a} vs {b}");
        }
    }
    assert_eq!(adam.step, 10);
}

#[test]
fn zero_gradient_leaves_parameters_and_decays_moments() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(2.0), ParamGroup::Classifier);
    let mut adam = Adam::new(&store);
    quadratic_step(&mut store, &mut adam, 2.0, 0.1);
    assert_eq!(store.iter().next().unwrap().value.item(), 2.0);
    assert_eq!((adam.m[0].item(), adam.v[0].item()), (0.0, 0.0));

    // after a real step the moments decay and only momentum moves w
    quadratic_step(&mut store, &mut adam, 0.0, 0.1);
    let w = store.iter().next().unwrap().value.item();
    let (m, v) = (adam.m[0].item(), adam.v[0].item());
    quadratic_step(&mut store, &mut adam, w, 0.1);
    assert_eq!(adam.m[0].item(), 0.9 * m);
    assert_eq!(adam.v[0].item(), 0.999 * v);
    let t = adam.step as i32;
    let expect = w - 0.1 * (0.9 * m / (1.0 - 0.9f64.powi(t))) / ((0.999 * v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
    assert!((store.iter().next().unwrap().value.item() - expect).abs() < 1e-14);
}

#[test]
fn frozen_parameters_are_skipped() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(2.0), ParamGroup::Backbone);
    store.set_frozen(ParamGroup::Backbone, true);
    let mut adam = Adam::new(&store);
    quadratic_step(&mut store, &mut adam, 0.0, 0.1);
    assert_eq!(store.iter().next().unwrap().value.item(), 2.0);
    assert_eq!(adam.m[0].item(), 0.0);
}
