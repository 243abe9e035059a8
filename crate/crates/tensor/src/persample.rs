use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A batch loss that is the mean of independent per-sample losses.
pub trait SampleLoss {
    fn num_samples(&self) -> usize;

    /// False when samples interact (e.g. normalization with batch statistics).
    fn is_decomposable(&self) -> bool {
        true
    }

    /// Mean loss over `samples`, recorded on `tape` with `params` as leaves.
    fn loss(&self, tape: &mut Tape, params: &[Var], samples: &[usize]) -> Result<Var>;
}

/// Gradient of `loss` over `samples` with respect to every parameter.
pub fn batch_grad<L: SampleLoss + ?Sized>(loss: &L, params: &[Tensor], samples: &[usize]) -> Result<(f32, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let l = loss.loss(&mut tape, &vars, samples)?;
    let value = tape.value(l)?.item()?;
    let grads = tape.grad(l, &vars)?;
    let grads = grads.into_iter().map(|g| tape.value(g).cloned()).collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// One gradient list per sample, computed by replaying the loss on
/// single-sample batches.
pub fn per_sample_grad<L: SampleLoss + ?Sized>(loss: &L, params: &[Tensor]) -> Result<Vec<Vec<Tensor>>> {
    if !loss.is_decomposable() {
        return Err(TensorError::NotDecomposable);
    }
    let n = loss.num_samples();
    if n == 0 {
        return Err(TensorError::InvalidArgument {
            op: "per_sample_grad",
            reason: "empty batch".into(),
        });
    }
    (0..n).map(|i| batch_grad(loss, params, &[i]).map(|(_, g)| g)).collect()
}
