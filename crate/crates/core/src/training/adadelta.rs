use crate::error::{Error, Result};
use crate::model::{GradientSet, ModelParams};
use crate::numerics::Matrix;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Running averages of squared gradients and squared updates, one pair per
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: Vec<Matrix>,
    pub sq_update: Vec<Matrix>,
}

impl AdadeltaState {
    pub fn for_shapes(shapes: &[(usize, usize)], rho: f64, eps: f64) -> Self {
        let zeros = |&(r, c): &(usize, usize)| Matrix::zeros(r, c);
        Self {
            rho,
            eps,
            sq_grad: shapes.iter().map(zeros).collect(),
            sq_update: shapes.iter().map(zeros).collect(),
        }
    }

    pub fn for_model(model: &ModelParams, rho: f64, eps: f64) -> Self {
        let shapes: Vec<(usize, usize)> = model.tensors().iter().map(|(_, m)| m.shape()).collect();
        Self::for_shapes(&shapes, rho, eps)
    }

    /// One update over parallel lists of parameters and gradients.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.sq_grad.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.sq_grad.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.sq_grad[i].shape() {
                return Err(Error::invalid(format!(
                    "tensor {i}: parameter {:?}, gradient {:?}, accumulator {:?}",
                    p.shape(),
                    g.shape(),
                    self.sq_grad[i].shape()
                )));
            }
        }
        let (rho, eps) = (self.rho, self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let eg = self.sq_grad[i].as_mut_slice();
            let ed = self.sq_update[i].as_mut_slice();
            for (((x, &gv), eg), ed) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(eg).zip(ed) {
                *eg = rho * *eg + (1.0 - rho) * gv * gv;
                let dx = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * gv;
                *ed = rho * *ed + (1.0 - rho) * dx * dx;
                *x += dx;
            }
        }
        Ok(())
    }

    pub fn update(&mut self, model: &mut ModelParams, grads: &GradientSet) -> Result<()> {
        let grad_refs: Vec<&Matrix> = grads.tensors().into_iter().map(|(_, m)| m).collect();
        let mut param_refs: Vec<&mut Matrix> = model.tensors_mut().into_iter().map(|(_, m)| m).collect();
        self.step(&mut param_refs, &grad_refs)
    }
}
