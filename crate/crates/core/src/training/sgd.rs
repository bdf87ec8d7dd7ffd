use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::NdArray;

/// Euclidean norm over every gradient array.
pub fn global_norm(grads: &BTreeMap<String, NdArray>) -> f64 {
    grads.values().map(NdArray::squared_norm).sum::<f64>().sqrt()
}

/// `p ← p − lr·g`, after rescaling `g` to norm `clip` when it is larger.
/// Parameters without a gradient entry are left alone. Returns the
/// pre-clipping norm.
pub fn sgd_update(
    params: &mut ParamStore,
    grads: &BTreeMap<String, NdArray>,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                format!("gradient '{name}'"),
                format!("parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of '{name}'")));
        }
    }
    let norm = global_norm(grads);
    let scale = match clip {
        Some(c) if norm > c && c > 0.0 => c / norm,
        _ => 1.0,
    };
    let step = lr * scale;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= step * d;
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> (ParamStore, BTreeMap<String, NdArray>) {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), NdArray::scalar(p));
        let mut gm = BTreeMap::new();
        gm.insert("p".to_string(), NdArray::scalar(g));
        (ParamStore::from_map(m), gm)
    }

    #[test]
    fn scalar_step() {
        let (mut p, g) = single(1.0, 0.5);
        sgd_update(&mut p, &g, 0.1, None).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 0.95);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut p, g) = single(1.0, 0.5);
        sgd_update(&mut p, &g, 0.0, None).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn clipping_scales_step() {
        let (mut p, g) = single(0.0, 4.0);
        let norm = sgd_update(&mut p, &g, 1.0, Some(1.0)).unwrap();
        assert_eq!(norm, 4.0);
        assert_eq!(p.get("p").unwrap().data()[0], -1.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut p, g) = single(1.0, f64::NAN);
        let err = sgd_update(&mut p, &g, 0.1, None).unwrap_err().to_string();
        assert!(err.contains("'p'"), "{err}");
        assert_eq!(p.get("p").unwrap().data()[0], 1.0);
    }
}
