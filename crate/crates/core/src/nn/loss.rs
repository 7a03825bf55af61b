use ndarray::{Array2, ArrayView2};

use super::Mlp;

pub const COS_EPS: f64 = 1e-8;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|p - t|^2 + lambda_cos (1 - p.t / (|p||t| + eps))` and its gradient in `p`.
pub fn loss_mse_cos(pred: &[f64], target: &[f64], lambda_cos: f64, eps: f64) -> (f64, Vec<f64>) {
    let mse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    let (np, nt) = (norm(pred), norm(target));
    let dot: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let den = np * nt + eps;
    let cos = dot / den;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let dcos = t / den - if np > 0.0 { dot * nt * p / (np * den * den) } else { 0.0 };
            2.0 * (p - t) - lambda_cos * dcos
        })
        .collect();
    (mse + lambda_cos * (1.0 - cos), grad)
}

/// Row mean of `loss_mse_cos` and its gradient with respect to `pred`.
pub fn mse_cos_batch(pred: ArrayView2<f64>, target: ArrayView2<f64>, lambda_cos: f64, eps: f64) -> (f64, Array2<f64>) {
    let n = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (k, (p, t)) in pred.rows().into_iter().zip(target.rows()).enumerate() {
        let (l, g) = loss_mse_cos(&p.to_vec(), &t.to_vec(), lambda_cos, eps);
        total += l;
        grad.row_mut(k).iter_mut().zip(g).for_each(|(a, b)| *a = b / n);
    }
    (total / n, grad)
}

/// Mean squared error over the SDF outputs of one sample.
pub fn loss_sdf(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Mean over every entry and its gradient.
pub fn sdf_mse_batch(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// `lambda_prior |z|^2` and its gradient.
pub fn latent_prior(z: &[f64], lambda_prior: f64) -> (f64, Vec<f64>) {
    let v = lambda_prior * z.iter().map(|x| x * x).sum::<f64>();
    (v, z.iter().map(|x| 2.0 * lambda_prior * x).collect())
}

/// `lambda_lip * prod_l softplus(|W_l|_F)` and its gradient over `net.params`.
pub fn lipschitz_penalty(net: &Mlp, lambda_lip: f64) -> (f64, Vec<f64>) {
    let ranges = net.weight_ranges();
    let norms: Vec<f64> = ranges.iter().map(|r| norm(&net.params[r.clone()])).collect();
    let sp: Vec<f64> = norms.iter().map(|&n| softplus(n)).collect();
    let value = lambda_lip * sp.iter().product::<f64>();
    let mut grad = vec![0.0; net.params.len()];
    for (l, r) in ranges.iter().enumerate() {
        if norms[l] == 0.0 {
            continue;
        }
        let others: f64 = sp.iter().enumerate().filter(|(m, _)| *m != l).map(|(_, s)| s).product();
        let scale = lambda_lip * others * sigmoid(norms[l]) / norms[l];
        for i in r.clone() {
            grad[i] = scale * net.params[i];
        }
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn mse_cos_cases() {
        let v = [0.3, -1.2, 2.0];
        let (l, _) = loss_mse_cos(&v, &v, 0.1, COS_EPS);
        assert!(l.abs() < 1e-8);
        let u = [1.0, 0.0, 0.0];
        let (l, _) = loss_mse_cos(&u, &[-1.0, 0.0, 0.0], 1.0, COS_EPS);
        assert!((l - 6.0).abs() < 1e-7);
        let (l, g) = loss_mse_cos(&[0.0; 3], &u, 1.0, COS_EPS);
        assert!((l - 2.0).abs() < 1e-12);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_lambda_is_pure_mse() {
        let p = ndarray::array![[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]];
        let t = ndarray::array![[0.5, 2.0, 2.0], [1.0, 1.0, 0.0]];
        let (l, _) = mse_cos_batch(p.view(), t.view(), 0.0, COS_EPS);
        let mse = ((0.25 + 1.0) + (1.0 + 4.0 + 0.25)) / 2.0;
        assert_eq!(l, mse);
    }

    #[test]
    fn sdf_and_prior() {
        assert_eq!(loss_sdf(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), 0.0);
        assert_eq!(latent_prior(&[0.0; 5], 1.0).0, 0.0);
        assert_eq!(latent_prior(&[1.0, 2.0], 0.5).0, 2.5);
    }

    #[test]
    fn lipschitz_grows_with_weights() {
        let net = Mlp::new(Architecture::sdf(4, 8, 5, 4, 1.0, 2)).unwrap();
        let (a, _) = lipschitz_penalty(&net, 1e-6);
        let mut big = net.clone();
        for r in net.weight_ranges() {
            big.params[r].iter_mut().for_each(|v| *v *= 2.0);
        }
        let (b, _) = lipschitz_penalty(&big, 1e-6);
        assert!(b > a && a > 0.0);
    }
}
