//! Patch discriminator over channel-stacked frames.

use crate::nn::layers::Conv2d;
use crate::nn::{seeded_rng, Binding, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    stages: Vec<Conv2d>,
    pub frames: usize,
}

impl PatchDiscriminator {
    /// Four stride-2 stages; the last emits one logit per patch.
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, frames: usize, hidden: usize) -> Self {
        let mut pb = pb.sub("disc");
        let widths = [3 * frames, hidden, 2 * hidden, 4 * hidden, 1];
        let stages = (0..4)
            .map(|i| Conv2d::new(&mut pb, &format!("stage{i}"), widths[i], widths[i + 1], 4, 2, 1, true))
            .collect();
        Self { stages, frames }
    }

    /// `x` is `[B·frames, H, W, 3]`; returns patch logits `[B, H/16, W/16, 1]`.
    pub fn forward<T: Scalar>(&self, p: &Binding<'_, T>, x: &Tensor<T>) -> Tensor<T> {
        let (bt, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let b = bt / self.frames;
        let mut z = x.reshape(&[b, self.frames, h, w, 3]).permute(&[0, 2, 3, 1, 4]).reshape(&[b, h, w, 3 * self.frames]);
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            z = s.forward(p, &z);
            if i < last {
                z = z.leaky_relu(0.2);
            }
        }
        z
    }
}

#[derive(Clone, Debug)]
pub struct DiscModel {
    pub arch: PatchDiscriminator,
    pub params: ParamStore<f32>,
}

impl DiscModel {
    pub fn init(frames: usize, hidden: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let arch = PatchDiscriminator::new(&mut ParamBuilder::new(&mut params, &mut rng), frames, hidden);
        Self { arch, params }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_are_one_per_patch() {
        let d = DiscModel::init(4, 8, 0);
        let x = Tensor::<f32>::full(&[8, 32, 32, 3], 0.5);
        let y = d.arch.forward(&Binding::frozen(&d.params), &x);
        assert_eq!(y.shape(), &[2, 2, 2, 1]);
    }
}
