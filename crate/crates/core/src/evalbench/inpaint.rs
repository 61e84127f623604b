use ladd_autodiff::Tensor;

use super::metrics::{masked_region, sliced_w2, visible_mse};
use crate::data::{apply_mask, make_mask, MaskKind, ToySpec};
use crate::error::{invalid, Result};
use crate::flow::{consistency_from, euler_from, Conditioning};
use crate::nets::DenoiserParams;
use crate::rng::{rng_for, split_seed};

/// Held-out inpainting evaluation with one mask shared by every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintEval {
    pub n_samples: usize,
    pub mask: MaskKind,
    /// Euler steps of the teacher baseline.
    pub teacher_steps: usize,
    pub n_proj: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintReport {
    /// `[1, h, w]`, 1 = visible.
    pub mask: Tensor,
    /// Student 1-step output against the ground truth on visible cells.
    pub visible_mse: f64,
    /// Masked-region sliced-W2 to the ground truth: 1-step student.
    pub student_masked_w2: f64,
    /// Masked-region sliced-W2 to the ground truth: multi-step teacher.
    pub teacher_masked_w2: f64,
}

/// Fills the masked region of held-out samples with a 1-step student and an
/// unguided multi-step Euler teacher, from the same noise.
pub fn evaluate_inpainting(
    student: &DenoiserParams,
    teacher: &DenoiserParams,
    spec: &ToySpec,
    eval: &InpaintEval,
) -> Result<InpaintReport> {
    if eval.n_samples < 2 || eval.teacher_steps < 1 {
        return Err(invalid(
            "inpaint eval",
            "n_samples >= 2 and teacher_steps >= 1 required",
        ));
    }
    let shape = spec.data_shape();
    let mut rng = rng_for(split_seed(eval.seed, "inpaint-eval"), "data");
    let mask = make_mask(eval.mask, &shape, &mut rng)?;
    let batch = spec.sample_real(eval.n_samples, &mut rng)?;
    let n = batch.len();
    let tiled: Vec<f64> = (0..n).flat_map(|_| mask.data().iter().copied()).collect();
    let full = Tensor::new(vec![n, 1, shape[1], shape[2]], tiled)?;
    let batch = apply_mask(batch, full.clone())?;
    let cond: Conditioning = batch.conditioning()?;
    let mut full_shape = vec![n];
    full_shape.extend(&shape);
    let noise = Tensor::randn(full_shape, &mut rng);

    let s_out = consistency_from(student, noise.clone(), &cond, &[1.0], &mut rng)?;
    let t_out = euler_from(teacher, noise, &cond, eval.teacher_steps, 1.0)?;
    let truth = masked_region(&batch.x0, &full)?;
    let proj = |seed: u64| rng_for(split_seed(seed, "inpaint-proj"), "sliced");
    Ok(InpaintReport {
        visible_mse: visible_mse(&s_out, &batch.x0, &full)?,
        student_masked_w2: sliced_w2(
            &masked_region(&s_out, &full)?,
            &truth,
            eval.n_proj,
            &mut proj(eval.seed),
        )?,
        teacher_masked_w2: sliced_w2(
            &masked_region(&t_out, &full)?,
            &truth,
            eval.n_proj,
            &mut proj(eval.seed),
        )?,
        mask,
    })
}
