//! Central finite-difference check of reverse-mode gradients.

use super::{Graph, Initializer, Result, Tensor, TensorError, Var};

/// Largest disagreement between analytic and numerical gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with an absolute floor so that gradients which are zero
/// up to rounding are not compared digit by digit.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar `f(inputs)` with
/// `(f(x + h) - f(x - h)) / 2h` for every input element.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().requires_grad(true))).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = probe[i].data()[j];
            probe[i].data_mut()[j] = x + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let err = rel_error(a, (up - down) / (2.0 * step), floor);
            if report.checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Dot product of `y` with fixed pseudo-random weights, so that every output
/// element gets a distinct upstream gradient.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).fract() - 0.4).collect();
    let w = g.constant(Tensor::new(g.shape(y), w)?);
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

/// One finite-difference check per primitive on seeded random inputs.
/// Inputs of `sqrt` and `log` are drawn positive, and those of `relu` and
/// `clamp` keep clear of the kinks.
pub fn primitive_suite(seed: u64, step: f64, floor: f64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut init = Initializer::new(seed);
    let mut u = |shape: &[usize]| init.uniform(shape, 1.0);
    let away = |t: Tensor, from: f64| {
        let data = t.data().iter().map(|&v| if (v - from).abs() < 0.05 { v + 0.1 } else { v }).collect();
        Tensor::new(t.shape(), data).expect("same shape")
    };
    let positive = |t: Tensor| {
        let data = t.data().iter().map(|&v| v.abs() + 0.2).collect();
        Tensor::new(t.shape(), data).expect("same shape")
    };
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("add", vec![u(&[3, 4]), u(&[4])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        }),
        ("sub", vec![u(&[2, 3, 1]), u(&[3, 4])], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        }),
        ("mul", vec![u(&[3, 4]), u(&[3, 1])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        }),
        ("matmul", vec![u(&[3, 5]), u(&[5, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        }),
        ("conv1d", vec![u(&[2, 3, 8]), u(&[4, 3, 4])], |g, v| {
            let y = g.conv1d(v[0], v[1], 2, 1)?;
            project(g, y)
        }),
        ("conv1d_unit_stride", vec![u(&[1, 2, 7]), u(&[3, 2, 3])], |g, v| {
            let y = g.conv1d(v[0], v[1], 1, 0)?;
            project(g, y)
        }),
        ("conv_transpose1d", vec![u(&[2, 3, 4]), u(&[3, 2, 4])], |g, v| {
            let y = g.conv_transpose1d(v[0], v[1], 2, 1)?;
            project(g, y)
        }),
        ("transpose", vec![u(&[2, 3, 4])], |g, v| {
            let y = g.transpose(v[0], 0, 2)?;
            project(g, y)
        }),
        ("reshape", vec![u(&[2, 6])], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y)
        }),
        ("slice", vec![u(&[3, 5])], |g, v| {
            let y = g.slice(v[0], 1, 1, 4)?;
            project(g, y)
        }),
        ("concat", vec![u(&[2, 3]), u(&[2, 2])], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            project(g, y)
        }),
        ("sum", vec![u(&[3, 4])], |g, v| {
            let y = g.sum(v[0], Some(0))?;
            project(g, y)
        }),
        ("mean", vec![u(&[3, 4])], |g, v| {
            let y = g.mean(v[0], Some(1))?;
            project(g, y)
        }),
        ("sqrt", vec![positive(u(&[6]))], |g, v| {
            let y = g.sqrt(v[0])?;
            project(g, y)
        }),
        ("exp", vec![u(&[6])], |g, v| {
            let y = g.exp(v[0])?;
            project(g, y)
        }),
        ("log", vec![positive(u(&[6]))], |g, v| {
            let y = g.log(v[0])?;
            project(g, y)
        }),
        ("sigmoid", vec![u(&[6])], |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y)
        }),
        ("tanh", vec![u(&[6])], |g, v| {
            let y = g.tanh(v[0])?;
            project(g, y)
        }),
        ("relu", vec![away(u(&[8]), 0.0)], |g, v| {
            let y = g.relu(v[0])?;
            project(g, y)
        }),
        ("softmax", vec![u(&[3, 4])], |g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y)
        }),
        ("clamp", vec![away(away(u(&[8]), -0.5), 0.5)], |g, v| {
            let y = g.clamp(v[0], -0.5, 0.5)?;
            project(g, y)
        }),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| check_gradients(&inputs, step, floor, f).map(|r| (name, r)))
        .collect()
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    match g.data(v) {
        [x] => Ok(*x),
        _ => Err(TensorError::NotScalar {
            shape: g.shape(v).to_vec(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_squares_passes() {
        let x = Tensor::vector(&[0.3, -1.2, 2.0]);
        let r = check_gradients(&[x], 1e-5, 1e-6, |g, v| {
            let s = g.square(v[0])?;
            let p = g.mul(s, v[0])?;
            g.sum(p, None)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn every_primitive_passes() {
        for (name, r) in primitive_suite(7, 1e-5, 1e-6).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn relative_error_uses_the_floor() {
        assert_eq!(rel_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(rel_error(0.0, 1e-9, 1e-6), 1e-3);
    }
}
