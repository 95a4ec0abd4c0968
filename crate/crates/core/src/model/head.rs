use super::params::{Bound, ParamId, ParamStore};
use super::{Embeddings, Encoder, EncoderInputs, Mode, Strategy};
use crate::autodiff::Tape;
use crate::autodiff::Tensor;
use crate::{Error, Result, Scalar};

/// Linear projector over precomputed image embeddings, for imported tasks
/// where tower internals are unavailable. The projector starts at identity;
/// class embeddings pass through unchanged.
#[derive(Clone, Debug)]
pub struct LinearHead<T = f64> {
    params: ParamStore<T>,
    projector: ParamId,
    strategy: Strategy,
    tau: T,
}

impl<T: Scalar> LinearHead<T> {
    /// Only `lvp` (train the projector) and `frozen` are meaningful here.
    pub fn new(dim: usize, strategy: Strategy, tau: f64) -> Result<Self> {
        if !matches!(strategy, Strategy::Lvp | Strategy::Frozen) {
            return Err(Error::Config(format!(
                "strategy {strategy} needs tower internals; precomputed embeddings support lvp or frozen"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        let mut params = ParamStore::new();
        let projector = params.insert("vision.projector", Tensor::identity(dim), strategy == Strategy::Lvp);
        Ok(Self {
            params,
            projector,
            strategy,
            tau: T::lit(tau),
        })
    }
}

impl<T: Scalar> Encoder<T> for LinearHead<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn strategy(&self) -> Strategy {
        self.strategy
    }

    fn tau(&self) -> T {
        self.tau
    }

    fn text_frozen(&self) -> bool {
        true
    }

    fn embed(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        inputs: &EncoderInputs<'_, T>,
        _mode: &mut Mode<'_>,
    ) -> Result<Embeddings> {
        let x = tape.constant(inputs.images);
        let projected = tape.matmul_nt(x, bound[self.projector])?;
        let images = tape.l2_normalize_rows(projected)?;
        let classes = tape.constant(inputs.classes);
        Ok(Embeddings { images, classes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_at_init_and_strategy_gate() {
        let head = LinearHead::<f64>::new(3, Strategy::Lvp, 0.01).unwrap();
        let images = Tensor::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let classes = Tensor::identity(3);
        let (img, cls) = head
            .embed_eval(&EncoderInputs {
                images: &images,
                classes: &classes,
            })
            .unwrap();
        assert_eq!(img, images);
        assert_eq!(cls, classes);
        assert_eq!(head.params().trainable_count(), 1);
        assert!(LinearHead::<f64>::new(3, Strategy::Lora, 0.01).is_err());
        assert!(LinearHead::<f64>::new(3, Strategy::Prompt, 0.01).is_err());
        assert_eq!(LinearHead::<f64>::new(3, Strategy::Frozen, 0.01).unwrap().params().trainable_count(), 0);
    }
}
