use super::{
    conv2d_backward, conv2d_forward, maxpool2_ceil, maxpool2_ceil_backward, relu, relu_backward,
    ConvCache, NetworkParams, NnError, PoolCache, Real, Tensor3,
};
use crate::dsnt::Heatmap;
use crate::{GrayImage, KeypointPair};

struct StageCache<T> {
    conv: ConvCache<T>,
    activated: Tensor3<T>,
    pool: PoolCache,
}

/// Intermediate state of one forward pass, consumed by [`NetworkParams::backward`].
pub struct ForwardCache<T> {
    stages: Vec<StageCache<T>>,
    features: ConvCache<T>,
}

impl<T: Real> NetworkParams<T> {
    /// Raw head and tail logits (each `K × K`, row-major).
    pub fn forward_tensor(
        &self,
        input: &Tensor3<T>,
    ) -> Result<(KeypointPair<Vec<T>>, ForwardCache<T>), NnError> {
        let size = self.arch.input_size;
        if input.height != size || input.width != size || input.channels != self.arch.in_channels {
            return Err(NnError::Shape(format!(
                "network expects {}x{size}x{size} input, got {}x{}x{}",
                self.arch.in_channels, input.channels, input.height, input.width
            )));
        }
        let mut stages = Vec::with_capacity(self.trunk.len());
        let mut x = input.clone();
        for block in &self.trunk {
            let (z, conv) = conv2d_forward(&x, block)?;
            let activated = relu(&z);
            let (pooled, pool) = maxpool2_ceil(&activated);
            stages.push(StageCache {
                conv,
                activated,
                pool,
            });
            x = pooled;
        }
        let (z_head, features) = conv2d_forward(&x, &self.head)?;
        let (z_tail, _) = conv2d_forward(&x, &self.tail)?;
        let cache = ForwardCache { stages, features };
        Ok((KeypointPair::new(z_head.data, z_tail.data), cache))
    }

    /// Head and tail logit heatmaps for one image.
    pub fn forward(&self, img: &GrayImage) -> Result<KeypointPair<Heatmap>, NnError> {
        let (z, _) = self.forward_tensor(&Tensor3::from_image(img))?;
        let k = self.arch.heatmap_size;
        Ok(z.map(|v| Heatmap::from_logits(k, v.into_iter().map(Real::as_f64).collect())))
    }

    /// Parameter gradients given dL/dZ for both heatmaps.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &KeypointPair<Vec<T>>,
    ) -> Result<NetworkParams<T>, NnError> {
        let k = self.arch.heatmap_size;
        let mut grads = self.zeros_like();
        let as_map = |g: &Vec<T>| Tensor3::new(1, k, k, g.clone());
        let grad_head = as_map(&grad_logits.head)?;
        let grad_tail = as_map(&grad_logits.tail)?;

        let mut dx = conv2d_backward(&cache.features, &self.head, &grad_head, &mut grads.head, true)?
            .expect("input gradient requested");
        let dx_tail = conv2d_backward(&cache.features, &self.tail, &grad_tail, &mut grads.tail, true)?
            .expect("input gradient requested");
        dx.data.iter_mut().zip(&dx_tail.data).for_each(|(a, b)| *a += *b);

        for (i, (stage, block)) in cache.stages.iter().zip(&self.trunk).enumerate().rev() {
            let d_act = maxpool2_ceil_backward(&stage.pool, &dx);
            let dz = relu_backward(&stage.activated, &d_act);
            let need_input = i > 0;
            match conv2d_backward(&stage.conv, block, &dz, &mut grads.trunk[i], need_input)? {
                Some(d) => dx = d,
                None => break,
            }
        }
        Ok(grads)
    }
}
