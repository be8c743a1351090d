use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// Returns `max_i |g_ad − g_fd| / (|g_ad| + |g_fd| + 1e-8)`. The function is
/// evaluated in the graph's element type `T`.
pub fn grad_check<T, F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let eval = |data: Vec<T>, track: bool| -> Result<(Graph<T>, Var, Var)> {
        let mut g = Graph::new();
        let xv = g.leaf(&x.shape, data, track)?;
        let out = f(&mut g, xv)?;
        if g.value(out).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.shape(out)
            )));
        }
        Ok((g, xv, out))
    };
    let base: Vec<T> = x.data.iter().map(|&v| T::from_f32(v)).collect();
    let (g, xv, out) = eval(base.clone(), true)?;
    let analytic: Vec<f64> = match g.backward(out)?.get(xv) {
        Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; base.len()],
    };
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut d = base.clone();
            d[i] += T::from_f64(delta);
            let (g, _, out) = eval(d, false)?;
            Ok(g.item(out).as_f64())
        };
        let fd = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        let ad = analytic[i];
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Finite-difference step used by [`op_suite`].
pub const OP_SUITE_EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `Σ y_i·r_i` with fixed non-uniform weights, so every output element
/// contributes a distinct cotangent.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = (0..g.value(y).len())
        .map(|i| (1.7 * i as f64 + 0.3).sin())
        .collect();
    let r = g.constant(&shape, r)?;
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Case = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

/// Max relative gradient error of every graph op, checked in `f64` against
/// each differentiable input in turn.
pub fn op_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&str, Vec<usize>, Case)> = Vec::new();
    let c6 = uniform(&mut rng, 6);
    macro_rules! binary {
        ($name:literal, $op:ident, $swap:expr) => {{
            let c = c6.clone();
            cases.push((
                $name,
                vec![2, 3],
                Box::new(move |g, x| {
                    let k = g.constant(&[2, 3], c.clone())?;
                    let y = if $swap { g.$op(k, x)? } else { g.$op(x, k)? };
                    probe(g, y)
                }),
            ));
        }};
    }
    binary!("add/lhs", add, false);
    binary!("add/rhs", add, true);
    binary!("sub/lhs", sub, false);
    binary!("sub/rhs", sub, true);
    binary!("mul/lhs", mul, false);
    binary!("mul/rhs", mul, true);
    cases.push((
        "add_scalar",
        vec![5],
        Box::new(|g, x| {
            let y = g.add_scalar(x, 0.7);
            probe(g, y)
        }),
    ));
    cases.push((
        "mul_scalar",
        vec![5],
        Box::new(|g, x| {
            let y = g.mul_scalar(x, -1.3);
            probe(g, y)
        }),
    ));
    cases.push((
        "silu",
        vec![7],
        Box::new(|g, x| {
            let y = g.silu(x);
            probe(g, y)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![7],
        Box::new(|g, x| {
            let y = g.sigmoid(x);
            probe(g, y)
        }),
    ));
    cases.push((
        "sin",
        vec![7],
        Box::new(|g, x| {
            let y = g.sin(x);
            probe(g, y)
        }),
    ));
    cases.push((
        "cos",
        vec![7],
        Box::new(|g, x| {
            let y = g.cos(x);
            probe(g, y)
        }),
    ));

    let mb = uniform(&mut rng, 20);
    let ma = uniform(&mut rng, 12);
    cases.push((
        "matmul/lhs",
        vec![3, 4],
        Box::new(move |g, x| {
            let b = g.constant(&[4, 5], mb.clone())?;
            let y = g.matmul(x, b)?;
            probe(g, y)
        }),
    ));
    cases.push((
        "matmul/rhs",
        vec![4, 5],
        Box::new(move |g, x| {
            let a = g.constant(&[3, 4], ma.clone())?;
            let y = g.matmul(a, x)?;
            probe(g, y)
        }),
    ));

    let (lx, lw, lb) = (
        uniform(&mut rng, 8),
        uniform(&mut rng, 12),
        uniform(&mut rng, 3),
    );
    {
        let (w, b) = (lw.clone(), lb.clone());
        cases.push((
            "linear/x",
            vec![2, 4],
            Box::new(move |g, x| {
                let w = g.constant(&[3, 4], w.clone())?;
                let b = g.constant(&[3], b.clone())?;
                let y = g.linear(x, w, Some(b))?;
                probe(g, y)
            }),
        ));
    }
    {
        let (xv, b) = (lx.clone(), lb.clone());
        cases.push((
            "linear/w",
            vec![3, 4],
            Box::new(move |g, w| {
                let x = g.constant(&[2, 4], xv.clone())?;
                let b = g.constant(&[3], b.clone())?;
                let y = g.linear(x, w, Some(b))?;
                probe(g, y)
            }),
        ));
    }
    cases.push((
        "linear/b",
        vec![3],
        Box::new(move |g, b| {
            let x = g.constant(&[2, 4], lx.clone())?;
            let w = g.constant(&[3, 4], lw.clone())?;
            let y = g.linear(x, w, Some(b))?;
            probe(g, y)
        }),
    ));

    let (cx, cw, cb) = (
        uniform(&mut rng, 2 * 36),
        uniform(&mut rng, 3 * 2 * 9),
        uniform(&mut rng, 3),
    );
    for stride in [1usize, 2] {
        let (w, b) = (cw.clone(), cb.clone());
        cases.push((
            if stride == 1 {
                "conv2d/x"
            } else {
                "conv2d_s2/x"
            },
            vec![2, 6, 6],
            Box::new(move |g, x| {
                let w = g.constant(&[3, 2, 3, 3], w.clone())?;
                let b = g.constant(&[3], b.clone())?;
                let y = g.conv2d(x, w, Some(b), stride)?;
                probe(g, y)
            }),
        ));
        let (xv, b) = (cx.clone(), cb.clone());
        cases.push((
            if stride == 1 {
                "conv2d/w"
            } else {
                "conv2d_s2/w"
            },
            vec![3, 2, 3, 3],
            Box::new(move |g, w| {
                let x = g.constant(&[2, 6, 6], xv.clone())?;
                let b = g.constant(&[3], b.clone())?;
                let y = g.conv2d(x, w, Some(b), stride)?;
                probe(g, y)
            }),
        ));
    }
    cases.push((
        "conv2d/b",
        vec![3],
        Box::new(move |g, b| {
            let x = g.constant(&[2, 6, 6], cx.clone())?;
            let w = g.constant(&[3, 2, 3, 3], cw.clone())?;
            let y = g.conv2d(x, w, Some(b), 1)?;
            probe(g, y)
        }),
    ));

    cases.push((
        "upsample2",
        vec![2, 3, 3],
        Box::new(|g, x| {
            let y = g.upsample2(x)?;
            probe(g, y)
        }),
    ));
    cases.push((
        "group_norm",
        vec![4, 3, 3],
        Box::new(|g, x| {
            let y = g.group_norm(x, 2)?;
            probe(g, y)
        }),
    ));

    let (fx, fs, fh) = (
        uniform(&mut rng, 12),
        uniform(&mut rng, 3),
        uniform(&mut rng, 3),
    );
    {
        let (s, h) = (fs.clone(), fh.clone());
        cases.push((
            "film/x",
            vec![3, 2, 2],
            Box::new(move |g, x| {
                let s = g.constant(&[3], s.clone())?;
                let h = g.constant(&[3], h.clone())?;
                let y = g.film(x, s, h)?;
                probe(g, y)
            }),
        ));
    }
    {
        let (xv, h) = (fx.clone(), fh.clone());
        cases.push((
            "film/scale",
            vec![3],
            Box::new(move |g, s| {
                let x = g.constant(&[3, 2, 2], xv.clone())?;
                let h = g.constant(&[3], h.clone())?;
                let y = g.film(x, s, h)?;
                probe(g, y)
            }),
        ));
    }
    cases.push((
        "film/shift",
        vec![3],
        Box::new(move |g, h| {
            let x = g.constant(&[3, 2, 2], fx.clone())?;
            let s = g.constant(&[3], fs.clone())?;
            let y = g.film(x, s, h)?;
            probe(g, y)
        }),
    ));

    let cc = uniform(&mut rng, 4);
    cases.push((
        "concat",
        vec![3, 2],
        Box::new(move |g, x| {
            let k = g.constant(&[2, 2], cc.clone())?;
            let y = g.concat(&[k, x, k])?;
            probe(g, y)
        }),
    ));
    cases.push((
        "reshape",
        vec![2, 3],
        Box::new(|g, x| {
            let y = g.reshape(x, &[3, 2])?;
            probe(g, y)
        }),
    ));
    cases.push((
        "mean",
        vec![5],
        Box::new(|g, x| {
            let s = g.sin(x);
            Ok(g.mean(s))
        }),
    ));
    cases.push((
        "sum",
        vec![5],
        Box::new(|g, x| {
            let s = g.sin(x);
            Ok(g.sum(s))
        }),
    ));
    let mt = uniform(&mut rng, 6);
    {
        let t = mt.clone();
        cases.push((
            "mse_loss/lhs",
            vec![6],
            Box::new(move |g, x| {
                let t = g.constant(&[6], t.clone())?;
                g.mse_loss(x, t)
            }),
        ));
    }
    cases.push((
        "mse_loss/rhs",
        vec![6],
        Box::new(move |g, x| {
            let t = g.constant(&[6], mt.clone())?;
            g.mse_loss(t, x)
        }),
    ));

    cases
        .into_iter()
        .map(|(name, shape, f)| {
            let n = shape.iter().product();
            let data = uniform(&mut rng, n).into_iter().map(|v| v as f32).collect();
            let x = Tensor::new(shape, data)?;
            Ok((name.to_string(), grad_check::<f64, _>(f, &x, OP_SUITE_EPS)?))
        })
        .collect()
}
