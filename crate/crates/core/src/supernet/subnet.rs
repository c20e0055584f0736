use super::net::{extract_prefix, scatter_prefix, Network};
use super::space::{ArchitectureConfig, Mask, SearchSpace};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// `m ⊙ Θ` as a full-layout network.
pub fn apply_mask<T: Scalar>(space: &SearchSpace, theta: &[Tensor<T>], mask: &Mask) -> Result<Network<T>> {
    let shape = space.supernet_shape();
    shape.check_params(theta)?;
    if mask.tensors.len() != theta.len() {
        return Err(Error::shape("mask", theta.len(), mask.tensors.len()));
    }
    let params = theta
        .iter()
        .zip(&mask.tensors)
        .map(|(p, m)| {
            if p.shape() != m.shape() {
                return Err(Error::shape("mask tensor", format!("{:?}", p.shape()), format!("{:?}", m.shape())));
            }
            Ok(Tensor::new(
                p.shape().to_vec(),
                p.data().iter().zip(m.data()).map(|(&a, &b)| a * T::of(b as f64)).collect(),
            )
            .expect("same shape"))
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(shape, params)
}

/// Logits of the subnetwork `s(x; m ⊙ Θ)` computed on the full graph.
pub fn subnet_forward<T: Scalar>(space: &SearchSpace, theta: &[Tensor<T>], mask: &Mask, x: &[T]) -> Result<Vec<f64>> {
    apply_mask(space, theta, mask)?.logits(x)
}

/// Index pairs `(full, compact)` mapping compact parameters into the supernet
/// layout for `cfg`.
fn param_map(space: &SearchSpace, cfg: &ArchitectureConfig) -> Result<Vec<(usize, usize)>> {
    let sub = space.subnet_shape(cfg)?;
    let full = space.supernet_shape().layout();
    let compact = sub.layout();
    let mut pairs = vec![(full.stem, compact.stem)];
    for (s, st) in sub.stages.iter().enumerate() {
        pairs.push((full.down[s], compact.down[s]));
        for b in 0..st.blocks {
            let (f1, f2) = full.blocks[s][b];
            let (c1, c2) = compact.blocks[s][b];
            pairs.push((f1, c1));
            pairs.push((f2, c2));
        }
    }
    pairs.push((full.head_w, compact.head_w));
    pairs.push((full.head_b, compact.head_b));
    Ok(pairs)
}

/// Standalone compact network holding the leading channel slices of `Θ`.
pub fn extract_subnet<T: Scalar>(space: &SearchSpace, theta: &[Tensor<T>], cfg: &ArchitectureConfig) -> Result<Network<T>> {
    space.supernet_shape().check_params(theta)?;
    let sub = space.subnet_shape(cfg)?;
    let shapes = sub.param_shapes();
    let mut params: Vec<Option<Tensor<T>>> = vec![None; shapes.len()];
    for (f, c) in param_map(space, cfg)? {
        params[c] = Some(extract_prefix(&theta[f], &shapes[c])?);
    }
    Network::new(sub, params.into_iter().map(|p| p.expect("every compact tensor mapped")).collect())
}

/// Accumulate compact-network gradients into full-layout gradient buffers.
/// Entries outside the active prefix (the masked ones) receive nothing.
pub fn scatter_grads<T: Scalar>(
    space: &SearchSpace,
    cfg: &ArchitectureConfig,
    compact: &[Tensor<T>],
    full: &mut [Tensor<T>],
) -> Result<()> {
    for (f, c) in param_map(space, cfg)? {
        let g = scatter_prefix(&compact[c], full[f].shape())?;
        full[f].add_assign(&g)?;
    }
    Ok(())
}

/// Write a (fine-tuned) compact network's weights back into a copy of `Θ`.
pub fn embed_subnet<T: Scalar>(
    space: &SearchSpace,
    theta: &[Tensor<T>],
    cfg: &ArchitectureConfig,
    net: &Network<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut out = theta.to_vec();
    for (f, c) in param_map(space, cfg)? {
        let shape = net.params[c].shape().to_vec();
        let full_shape = out[f].shape().to_vec();
        let placed = scatter_prefix(&net.params[c], &full_shape)?;
        let keep = scatter_prefix(&Tensor::<T>::full(&shape, T::one()), &full_shape)?;
        for ((o, p), k) in out[f].data_mut().iter_mut().zip(placed.data()).zip(keep.data()) {
            if !k.is_zero() {
                *o = *p;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn all_ones_mask_matches_supernet() {
        let space = SearchSpace::default();
        let mut rng = Rng::new(3);
        let net = Network::<f32>::init(space.supernet_shape(), &mut rng);
        let mask = space.config_to_mask(&space.maximal_config()).unwrap();
        let x: Vec<f32> = (0..256).map(|_| rng.normal() as f32).collect();
        assert_eq!(subnet_forward(&space, &net.params, &mask, &x).unwrap(), net.logits(&x).unwrap());
    }

    #[test]
    fn masked_equals_extracted() {
        let space = SearchSpace::default();
        let mut rng = Rng::new(11);
        let net = Network::<f32>::init(space.supernet_shape(), &mut rng);
        let cfgs = space.enumerate();
        for i in [0, 77, 300, 511] {
            let mask = space.config_to_mask(&cfgs[i]).unwrap();
            let x: Vec<f32> = (0..256).map(|_| rng.normal() as f32).collect();
            let a = subnet_forward(&space, &net.params, &mask, &x).unwrap();
            let b = extract_subnet(&space, &net.params, &cfgs[i]).unwrap().logits(&x).unwrap();
            let d = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6, "config {i}: {d}");
        }
    }

    #[test]
    fn scattered_grads_vanish_outside_mask() {
        let space = SearchSpace::default();
        let mut rng = Rng::new(2);
        let net = Network::<f32>::init(space.supernet_shape(), &mut rng);
        let cfg = space.enumerate()[5].clone();
        let sub = extract_subnet(&space, &net.params, &cfg).unwrap();
        let x: Vec<f32> = (0..256).map(|_| rng.normal() as f32).collect();
        let g = sub.loss_and_grad(&[(&x, 1)]).unwrap();
        let mut full: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        scatter_grads(&space, &cfg, &g.grads, &mut full).unwrap();
        let mask = space.config_to_mask(&cfg).unwrap();
        for (gt, mt) in full.iter().zip(&mask.tensors) {
            for (g, m) in gt.data().iter().zip(mt.data()) {
                if *m == 0.0 {
                    assert_eq!(*g, 0.0);
                }
            }
        }
    }

    #[test]
    fn embed_then_extract_roundtrips() {
        let space = SearchSpace::default();
        let mut rng = Rng::new(4);
        let theta = Network::<f32>::init(space.supernet_shape(), &mut rng).params;
        let cfg = space.enumerate()[100].clone();
        let mut sub = extract_subnet(&space, &theta, &cfg).unwrap();
        for p in &mut sub.params {
            p.fill(0.5);
        }
        let merged = embed_subnet(&space, &theta, &cfg, &sub).unwrap();
        assert_eq!(extract_subnet(&space, &merged, &cfg).unwrap(), sub);
        let mask = space.config_to_mask(&cfg).unwrap();
        for ((a, b), m) in merged.iter().zip(&theta).zip(&mask.tensors) {
            for ((x, y), k) in a.data().iter().zip(b.data()).zip(m.data()) {
                if *k == 0.0 {
                    assert_eq!(x, y);
                }
            }
        }
    }
}
