use ddnas_core::dag::SearchDag;
use ddnas_core::discretization::{self, DiscretizationHead};
use ddnas_core::gradcheck::{model_gradient_errors, tape_gradient_error};
use ddnas_core::model::{self, Batch, LossSettings, ModelSpec};
use ddnas_core::rng;
use ddnas_core::text::Example;
use ddnas_core::{Classifier, LossKind, OpKind, Operation, ParamStore, Tape, Tensor, TrainConfig};

const H: f64 = 1e-5;

fn tiny() -> TrainConfig {
    TrainConfig {
        dim: 6,
        n_nodes: 2,
        k: 3,
        l_max: 5,
        ..TrainConfig::desk()
    }
}

/// Moves every parameter off its initialization (zero biases put relu inputs
/// exactly on the kink at all-PAD windows).
fn randomize(model: &mut Classifier, seed: u64) {
    let mut r = rng::seeded(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        let v = rng::uniform(&mut r, model.store.get(id).shape(), 0.5);
        *model.store.get_mut(id) = v;
    }
}

fn tiny_batch() -> Batch {
    Batch::from_examples(&[
        Example {
            id: 0,
            token_ids: vec![2, 5, 3, 0, 0],
            true_length: 3,
            label: 0,
        },
        Example {
            id: 1,
            token_ids: vec![4, 6, 7, 2, 0],
            true_length: 4,
            label: 1,
        },
    ])
    .unwrap()
}

#[test]
fn every_operation_matches_finite_differences() {
    for kind in OpKind::ALL {
        let mut store = ParamStore::new();
        let op = Operation::init_parameters(kind, 3, 11, "op", &mut store);
        let x = rng::uniform(&mut rng::seeded(2), &[2, 8, 3], 1.0);
        let w = rng::uniform(&mut rng::seeded(3), &[2, 8, 3], 1.0);
        let mut inputs = vec![x];
        inputs.extend(store.entries().iter().map(|e| e.value.clone()));
        let err = tape_gradient_error(&inputs, H, |t, v| {
            let out = if kind.is_conv() {
                let st = kind.settings();
                t.conv1d(
                    v[0],
                    v[1],
                    v[2],
                    st.padding.unwrap(),
                    st.dilation.unwrap_or(1),
                )?
            } else {
                let empty = ParamStore::new().bind(t, |_| false);
                op.apply(t, &empty, v[0])?
            };
            let w = t.constant(w.clone());
            let p = t.mul(out, w)?;
            Ok(t.sum_all(p))
        })
        .unwrap();
        assert!(err < 1e-4, "{kind}: relative error {err:e}");
    }
}

#[test]
fn mixed_edge_gradients_cover_alpha_and_weights() {
    let mut store = ParamStore::new();
    let dag = SearchDag::new(1, 4, &OpKind::ALL, &mut store, &mut rng::seeded(5)).unwrap();
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let v = rng::uniform(&mut rng::seeded(50 + i as u64), store.get(id).shape(), 0.5);
        *store.get_mut(id) = v;
    }
    let x = rng::uniform(&mut rng::seeded(7), &[2, 6, 4], 1.0);
    let w = rng::uniform(&mut rng::seeded(8), &[2, 6, 4], 1.0);
    let value = |store: &ParamStore, x: &Tensor, grads: bool| {
        let mut t = Tape::new();
        let b = store.bind(&mut t, |_| grads);
        let xv = t.variable(x.clone());
        let out = dag.mixed_edge(&mut t, &b, (0, 1), xv).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(out, wv).unwrap();
        let s = t.sum_all(p);
        (t, b, xv, s)
    };
    let (mut t, b, xv, s) = value(&store, &x, true);
    t.backward(s).unwrap();
    let eval = |store: &ParamStore, x: &Tensor| {
        let (t, _, _, s) = value(store, x, false);
        t.value(s).item().unwrap()
    };
    let num_x = ddnas_core::gradcheck::central_difference(
        |d| {
            eval(
                &store,
                &Tensor::new(x.shape().to_vec(), d.to_vec()).unwrap(),
            )
        },
        x.data(),
        H,
    );
    let err = ddnas_core::gradcheck::relative_error(t.grad(xv).unwrap(), &num_x);
    assert!(err < 1e-4, "input: {err:e}");
    let mut probe = store.clone();
    for id in store.ids() {
        let base = store.get(id).data().to_vec();
        let num = ddnas_core::gradcheck::central_difference(
            |d| {
                probe.get_mut(id).data_mut().copy_from_slice(d);
                eval(&probe, &x)
            },
            &base,
            H,
        );
        probe.get_mut(id).data_mut().copy_from_slice(&base);
        let err = ddnas_core::gradcheck::relative_error(t.grad(b.var(id)).unwrap(), &num);
        assert!(err < 1e-4, "{}: {err:e}", store.entry(id).name);
    }
}

#[test]
fn j_d_gradient_through_head() {
    let mut store = ParamStore::new();
    let head = DiscretizationHead::new(4, 3, "h", &mut store, &mut rng::seeded(1)).unwrap();
    let x = rng::uniform(&mut rng::seeded(2), &[2, 5, 4], 1.0);
    let inputs = vec![
        x,
        store.get(head.weight).clone(),
        store.get(head.bias).clone(),
    ];
    let err = tape_gradient_error(&inputs, H, |t, v| {
        let logits = t.affine(v[0], v[1], v[2])?;
        let p = t.softmax(logits, 2)?;
        discretization::j_d(t, p)
    })
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn j_c_gradient_both_forms() {
    for kind in [LossKind::BinaryPerClass, LossKind::Categorical] {
        let logits = rng::uniform(&mut rng::seeded(9), &[4, 3], 2.0);
        let err = tape_gradient_error(&[logits], H, |t, v| {
            let p = t.softmax(v[0], 1)?;
            model::j_c(t, p, &[0, 2, 1, 2], kind)
        })
        .unwrap();
        assert!(err < 1e-4, "{kind:?}: {err:e}");
    }
}

#[test]
fn joint_loss_gradient_every_parameter() {
    let cfg = tiny();
    let mut model = Classifier::new(&ModelSpec::search(8, 2, &cfg), 21).unwrap();
    randomize(&mut model, 22);
    let errors =
        model_gradient_errors(&model, &tiny_batch(), LossSettings::from_config(&cfg), H).unwrap();
    assert!(!errors.is_empty());
    for (name, err) in errors {
        assert!(err < 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn joint_loss_gradient_fixed_architecture() {
    let cfg = tiny();
    let search = Classifier::new(&ModelSpec::search(8, 2, &cfg), 3).unwrap();
    let mut arch = search.architecture();
    arch.edges[1] = ddnas_core::dag::DerivedEdge::new(0, 2, OpKind::MaxPool);
    arch.edges[2] = ddnas_core::dag::DerivedEdge::new(1, 2, OpKind::Dilated2);
    let mut model = Classifier::from_architecture(&arch, 8, 2, &cfg, 4).unwrap();
    randomize(&mut model, 5);
    let errors =
        model_gradient_errors(&model, &tiny_batch(), LossSettings::from_config(&cfg), H).unwrap();
    for (name, err) in errors {
        assert!(err < 1e-3, "{name}: relative error {err:e}");
    }
}
