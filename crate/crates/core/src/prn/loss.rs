use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to squared norms during training so the distance stays
/// differentiable at the zero vector.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// `1 − cos θ`, in `[0, 2]`.
    #[default]
    OneMinusCosine,
    /// `θ / π`, in `[0, 1]`.
    Angular,
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Input(format!("embedding sizes {} and {} differ or are empty", u.len(), v.len())));
    }
    Ok(())
}

/// `1 − u·v / (‖u‖‖v‖)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    distance(u, v, DistanceKind::OneMinusCosine)
}

pub fn distance(u: &[f64], v: &[f64], kind: DistanceKind) -> Result<f64> {
    check_dims(u, v)?;
    let (nu, nv) = (dot(u, u).sqrt(), dot(v, v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine distance of a zero vector".into()));
    }
    let cos = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(match kind {
        DistanceKind::OneMinusCosine => 1.0 - cos,
        DistanceKind::Angular => cos.acos() / std::f64::consts::PI,
    })
}

/// Training form of the distance with gradients `(d, ∂d/∂u, ∂d/∂v)`.
/// Norms are stabilized, and the angular form clamps the cosine slightly
/// inside `±1` to keep its derivative finite.
pub fn distance_with_grad(u: &[f64], v: &[f64], kind: DistanceKind) -> (f64, Vec<f64>, Vec<f64>) {
    let nu2 = dot(u, u) + NORM_EPS;
    let nv2 = dot(v, v) + NORM_EPS;
    let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
    let uv = dot(u, v);
    let cos = uv / (nu * nv);
    // ∂cos/∂u = v/(|u||v|) − cos·u/|u|²
    let dcos_du: Vec<f64> = u.iter().zip(v).map(|(&a, &b)| b / (nu * nv) - cos * a / nu2).collect();
    let dcos_dv: Vec<f64> = u.iter().zip(v).map(|(&a, &b)| a / (nu * nv) - cos * b / nv2).collect();
    let (d, scale) = match kind {
        DistanceKind::OneMinusCosine => (1.0 - cos, -1.0),
        DistanceKind::Angular => {
            let c = cos.clamp(-1.0 + 1e-9, 1.0 - 1e-9);
            (c.acos() / std::f64::consts::PI, -1.0 / (std::f64::consts::PI * (1.0 - c * c).sqrt()))
        }
    };
    (
        d,
        dcos_du.into_iter().map(|g| g * scale).collect(),
        dcos_dv.into_iter().map(|g| g * scale).collect(),
    )
}

/// `max(d_ap − d_an + margin, 0)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Sum of [`triplet_loss`] over aligned distance lists.
pub fn triplet_batch_loss(d_ap: &[f64], d_an: &[f64], margin: f64) -> f64 {
    d_ap.iter().zip(d_an).map(|(&p, &n)| triplet_loss(p, n, margin)).sum()
}

/// Loss of one triplet's embeddings and its gradients `(∂a, ∂p, ∂n)`.
pub fn triplet_with_grad(a: &[f64], p: &[f64], n: &[f64], margin: f64, kind: DistanceKind) -> (f64, [Vec<f64>; 3]) {
    let (d_ap, ga1, gp) = distance_with_grad(a, p, kind);
    let (d_an, ga2, gn) = distance_with_grad(a, n, kind);
    let loss = triplet_loss(d_ap, d_an, margin);
    if loss <= 0.0 {
        let z = vec![0.0; a.len()];
        return (0.0, [z.clone(), z.clone(), z]);
    }
    let ga = ga1.iter().zip(&ga2).map(|(x, y)| x - y).collect();
    (loss, [ga, gp, gn.into_iter().map(|g| -g).collect()])
}

/// `−log p(label)` of a two-class logit pair and its gradient.
pub fn cross_entropy_with_grad(logits: &[f64], lesion: bool) -> (f64, [f64; 2]) {
    let p1 = crate::nn::softmax2(logits[0], logits[1]);
    let y = lesion as u8 as f64;
    let py = if lesion { p1 } else { 1.0 - p1 };
    let loss = -py.max(1e-300).ln();
    let d = p1 - y;
    (loss, [-d, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, -1.0], &[-2.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err().code(), "E_NUMERIC");
        assert!((distance(&[1.0, 0.0], &[0.0, 1.0], DistanceKind::Angular).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(0.1, 0.9, 0.5), 0.0);
        assert_eq!(triplet_loss(0.4, 0.4, 0.5), 0.5);
        assert!((triplet_loss(0.8, 0.2, 0.5) - 1.1).abs() < 1e-15);
        assert!((triplet_batch_loss(&[0.8, 0.1], &[0.2, 0.9], 0.5) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let u = [0.3, -1.2, 0.5, 2.0];
        let v = [1.1, 0.4, -0.7, 0.2];
        for kind in [DistanceKind::OneMinusCosine, DistanceKind::Angular] {
            let (_, gu, gv) = distance_with_grad(&u, &v, kind);
            let h = 1e-6;
            for i in 0..4 {
                let (mut up, mut dn) = (u, u);
                up[i] += h;
                dn[i] -= h;
                let num = (distance(&up, &v, kind).unwrap() - distance(&dn, &v, kind).unwrap()) / (2.0 * h);
                assert!((num - gu[i]).abs() < 1e-8);
                let (mut up, mut dn) = (v, v);
                up[i] += h;
                dn[i] -= h;
                let num = (distance(&u, &up, kind).unwrap() - distance(&u, &dn, kind).unwrap()) / (2.0 * h);
                assert!((num - gv[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let l = [0.2, -0.7];
        for lesion in [true, false] {
            let (_, g) = cross_entropy_with_grad(&l, lesion);
            let h = 1e-6;
            for i in 0..2 {
                let (mut a, mut b) = (l, l);
                a[i] += h;
                b[i] -= h;
                let num = (cross_entropy_with_grad(&a, lesion).0 - cross_entropy_with_grad(&b, lesion).0) / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 8),
            v in proptest::collection::vec(-10.0f64..10.0, 8),
            alpha in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let d = cosine_distance(&u, &v).unwrap();
            prop_assert!((d - cosine_distance(&v, &u).unwrap()).abs() < 1e-12);
            let su: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            prop_assert!((d - cosine_distance(&su, &v).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}
