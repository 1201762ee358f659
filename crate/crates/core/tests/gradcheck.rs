use rand::Rng;
use rand_distr::StandardNormal;
use radiogen_core::autodiff::{Tape, Var};
use radiogen_core::model::{mse_loss, EncoderModel, ModelConfig};
use radiogen_core::nn::{Bound, Conv1dK1, LayerNorm, Linear, Mlp, Mode, MultiHeadSelfAttention, ParamStore};
use radiogen_core::rng::substream;
use radiogen_core::tensor::Tensor;

const H: f64 = 1e-6;
const RTOL: f64 = 1e-3;
const ATOL: f64 = 1e-5;

fn randn(shape: &[usize], label: &str) -> Tensor {
    let mut rng = substream(7, label);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Reduce `out` to a scalar with fixed random weights so every output element matters.
fn project(tape: &mut Tape, out: Var) -> Var {
    let w = randn(tape.shape(out), "projection");
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    assert!(
        (analytic - numeric).abs() <= ATOL + RTOL * numeric.abs(),
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

/// Compare reverse-mode gradients with central differences for every input element.
fn check<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        let loss = project(&mut tape, out);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let loss = project(&mut tape, out);
    tape.backward(loss).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let grad = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            assert_close(grad.data()[i], numeric, &format!("input {k}, element {i}"));
        }
    }
}

#[test]
fn elementwise_ops() {
    let a = randn(&[3, 4], "a");
    let b = randn(&[3, 4], "b");
    check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check(&[a.clone()], |t, v| t.scale(v[0], -1.7));
    check(&[a.clone()], |t, v| t.gelu(v[0]));
    // keep inputs away from the kink
    let shifted = a.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    check(&[shifted], |t, v| t.relu(v[0]));
}

#[test]
fn broadcasting_ops() {
    let a = randn(&[3, 4], "a");
    let row = randn(&[4], "row");
    let s = randn(&[1], "s");
    check(&[a.clone(), row.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check(&[a.clone(), row.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check(&[a.clone(), s.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
}

#[test]
fn matmul_variants() {
    let a = randn(&[3, 5], "a");
    let b = randn(&[5, 2], "b");
    let c = randn(&[4, 5], "c");
    check(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap());
    check(&[a, c], |t, v| t.matmul_bt(v[0], v[1]).unwrap());
}

#[test]
fn softmax_and_layer_norm() {
    let x = randn(&[3, 6], "x");
    check(&[x.clone()], |t, v| t.softmax(v[0]));
    let gain = randn(&[6], "gain");
    let bias = randn(&[6], "bias");
    check(&[x, gain, bias], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
}

#[test]
fn conv2d_with_stride_and_padding() {
    let x = randn(&[2, 7, 7], "x");
    let w = randn(&[3, 2, 3, 3], "w");
    let b = randn(&[3], "b");
    check(&[x.clone(), w.clone(), b.clone()], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1).unwrap());
    check(&[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], 1, 0).unwrap());
}

#[test]
fn shape_ops_and_reductions() {
    let x = randn(&[3, 4], "x");
    let y = randn(&[3, 4], "y");
    check(&[x.clone()], |t, v| t.transpose(v[0]).unwrap());
    check(&[x.clone()], |t, v| t.reshape(v[0], &[2, 6]).unwrap());
    check(&[x.clone()], |t, v| t.col_slice(v[0], 1, 2).unwrap());
    check(&[x.clone(), y.clone()], |t, v| {
        let a = t.col_slice(v[0], 0, 3).unwrap();
        t.concat_cols(&[a, v[1]]).unwrap()
    });
    check(&[x.clone()], |t, v| t.mean_rows(v[0]).unwrap());
    check(&[x.clone(), y.clone()], |t, v| t.mean_of(&[v[0], v[1], v[0]]).unwrap());
    check(&[x.clone()], |t, v| {
        let m = t.mean(v[0]);
        let s = t.sum(v[0]);
        t.add(m, s).unwrap()
    });
    check(&[x], |t, v| t.mask_mul(v[0], (0..12).map(|i| (i % 3) as f64).collect()).unwrap());
}

/// Gradient check over every parameter of `store` plus the layer input.
fn check_layer<F>(store: &ParamStore, x: &Tensor, f: F)
where
    F: Fn(&mut Tape, &Bound, Var) -> Var,
{
    let eval = |s: &ParamStore, x: &Tensor| {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let out = f(&mut tape, &p, xv);
        let loss = project(&mut tape, out);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, &p, xv);
    let loss = project(&mut tape, out);
    tape.backward(loss).unwrap();
    let dx = tape.grad(xv).unwrap().clone();
    let grads = store.collect_grads(&mut tape, &p);
    for i in 0..x.len() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[i] += H;
        b.data_mut()[i] -= H;
        let numeric = (eval(store, &a) - eval(store, &b)) / (2.0 * H);
        assert_close(dx.data()[i], numeric, &format!("input[{i}]"));
    }
    let names: Vec<String> = store.iter().map(|q| q.name.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let base = store.iter().nth(k).unwrap().value.clone();
        for i in 0..base.len() {
            let shifted = |delta: f64| {
                let mut s = store.clone();
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                s.set(name, t).unwrap();
                eval(&s, x)
            };
            let numeric = (shifted(H) - shifted(-H)) / (2.0 * H);
            assert_close(grads[k].data()[i], numeric, &format!("{name}[{i}]"));
        }
    }
}

#[test]
fn attention_layer() {
    let mut store = ParamStore::new(3);
    let attn = MultiHeadSelfAttention::new(&mut store, "attn", 6, 2).unwrap();
    // larger weights give attention patterns far from uniform
    for param in store.iter_mut() {
        param.value = param.value.map(|v| v * 20.0);
    }
    check_layer(&store, &randn(&[5, 6], "x"), |t, p, x| attn.forward(t, p, x).unwrap().output);
}

#[test]
fn dense_layers() {
    let mut store = ParamStore::new(4);
    let lin = Linear::new(&mut store, "lin", 6, 4).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    let mlp = Mlp::new(&mut store, "mlp", 4, 7).unwrap();
    let head = Conv1dK1::new(&mut store, "head", 4, 3).unwrap();
    for param in store.iter_mut() {
        param.value = param.value.map(|v| v * 10.0 + 0.1);
    }
    check_layer(&store, &randn(&[5, 6], "x"), |t, p, x| {
        let h = lin.forward(t, p, x).unwrap();
        let h = ln.forward(t, p, h).unwrap();
        let h = mlp.forward(t, p, h).unwrap();
        head.forward(t, p, h).unwrap()
    });
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: 8,
        cnn_channels: vec![3],
        token_dim: 8,
        encoder_layers: 2,
        heads: 2,
        mlp_hidden: 12,
        head_dropout: 0.0,
        gene_count: 3,
        seed: 11,
    }
}

fn model_loss(model: &EncoderModel, slices: &[Tensor], target: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let mut rng = substream(0, "unused");
    let pred = model.forward_patient(&mut tape, &p, slices, Mode::Eval, &mut rng).unwrap();
    let tgt = tape.constant(target.clone());
    let loss = mse_loss(&mut tape, pred, tgt).unwrap();
    tape.value(loss).item()
}

#[test]
fn full_model_matches_finite_differences() {
    let model = EncoderModel::new(tiny_config()).unwrap();
    let slices = vec![randn(&[1, 8, 8], "s0"), randn(&[1, 8, 8], "s1")];
    let target = randn(&[3], "target");

    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let mut rng = substream(0, "unused");
    let pred = model.forward_patient(&mut tape, &p, &slices, Mode::Eval, &mut rng).unwrap();
    let tgt = tape.constant(target.clone());
    let loss = mse_loss(&mut tape, pred, tgt).unwrap();
    tape.backward(loss).unwrap();
    let grads = model.params().collect_grads(&mut tape, &p);

    let mut checked = 0;
    for (k, param) in model.params().iter().enumerate() {
        for i in 0..param.value.len() {
            let mut perturbed = model.clone();
            let mut eval = |delta: f64| {
                let v = perturbed.params_mut().iter_mut().nth(k).unwrap();
                let orig = v.value.data()[i];
                v.value.data_mut()[i] = orig + delta;
                let l = model_loss(&perturbed, &slices, &target);
                perturbed.params_mut().iter_mut().nth(k).unwrap().value.data_mut()[i] = orig;
                l
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            assert_close(grads[k].data()[i], numeric, &format!("{}[{i}]", param.name));
            checked += 1;
        }
    }
    assert_eq!(checked, model.params().total_elements());
}
