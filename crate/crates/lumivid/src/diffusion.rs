//! Noise schedules, the training step, and the deterministic Heun sampler
//! with classifier-free guidance against a negative context token.

use serde::{Deserialize, Serialize};

use crate::conditioning::{
    assemble_conditioning, encode_env_latent, fuse, substitute_condition_token, Chunk,
    FusedLatent,
};
use crate::geometry::{group_plucker, plucker_field, CameraTrajectory};
use crate::lighting::{build_env_buffers, EnvMap};
use crate::model::{
    loss_and_grads, precondition, ModelConfig, ParameterStore, PreparedExample,
};
use crate::oracle::{VideoTriplet, NEGATIVE_ID, NULL_ID};
use crate::rng::{streams, Rng};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer;
use crate::{Error, Result};

/// Deterministic sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Perturbation scale of the substituted first-frame token, shared
    /// between training and sampling.
    pub sigma_cond: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 35,
            guidance_scale: 7.0,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_cond: 0.02,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs steps >= 1".into()));
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_min > 0.0) {
            return Err(Error::Config(format!(
                "need sigma_max > sigma_min > 0, got {} and {}",
                self.sigma_max, self.sigma_min
            )));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::Config("guidance scale must be >= 0".into()));
        }
        if self.sigma_cond < 0.0 {
            return Err(Error::Config("sigma_cond must be >= 0".into()));
        }
        Ok(())
    }
}

/// Log-normal noise-level sampling for training, plus regularization knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainNoiseConfig {
    pub p_mean: f64,
    pub p_std: f64,
    /// Condition-token perturbation scale during training.
    pub sigma_cond: f64,
    /// Probability of dropping context ids to NULL (classifier-free training).
    pub ctx_dropout: f64,
}

impl Default for TrainNoiseConfig {
    fn default() -> Self {
        TrainNoiseConfig { p_mean: -1.2, p_std: 1.2, sigma_cond: 0.02, ctx_dropout: 0.1 }
    }
}

impl TrainNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_std > 0.0) {
            return Err(Error::Config("p_std must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ctx_dropout) {
            return Err(Error::Config("ctx_dropout must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Karras sigma schedule: `steps` strictly decreasing levels from sigma_max
/// to sigma_min under the rho warp, with a terminal zero appended.
pub fn karras_schedule(cfg: &SamplerConfig) -> Vec<f64> {
    let n = cfg.steps;
    let mut out = Vec::with_capacity(n + 1);
    if n == 1 {
        out.push(cfg.sigma_max);
    } else {
        let inv_rho = 1.0 / cfg.rho;
        let a = cfg.sigma_max.powf(inv_rho);
        let b = cfg.sigma_min.powf(inv_rho);
        for i in 0..n {
            let f = i as f64 / (n - 1) as f64;
            out.push((a + f * (b - a)).powf(cfg.rho));
        }
    }
    out.push(0.0);
    out
}

/// Classifier-free guidance combination `d_neg + s (d_cond - d_neg)`.
/// The endpoints s = 1 and s = 0 return the corresponding branch bit-exactly.
pub fn cfg_combine<T: Scalar>(d_cond: &Tensor<T>, d_neg: &Tensor<T>, s: f64) -> Tensor<T> {
    assert_eq!(d_cond.shape(), d_neg.shape(), "cfg_combine shape mismatch");
    if s == 1.0 {
        return d_cond.clone();
    }
    if s == 0.0 {
        return d_neg.clone();
    }
    let sv = T::from_f64(s);
    let mut out = d_neg.clone();
    for (o, (&c, &n)) in out.data_mut().iter_mut().zip(d_cond.data().iter().zip(d_neg.data()))
    {
        *o = n.add(sv.mul(c.sub(n)));
    }
    out
}

/// Static per-example training inputs, precomputed once from a triplet:
/// clean latents, first-frame latent, env latent, conditioning fields, ids.
#[derive(Debug, Clone)]
pub struct TrainExample<T> {
    pub z0: [Tensor<T>; 3],
    pub z_image: Tensor<T>,
    pub env_latent: Tensor<T>,
    pub fields: [Tensor<T>; 3],
    pub ctx_ids: Vec<i64>,
}

impl<T: Scalar> TrainExample<T> {
    /// Encode a rendered triplet into training-ready tensors. The triplet's
    /// trajectory must already be normalized.
    pub fn from_triplet(triplet: &VideoTriplet, cfg: &ModelConfig) -> Result<Self> {
        let shape = &cfg.shape;
        let z0_v = tokenizer::encode(&triplet.rgb, shape)?;
        let z0_a = tokenizer::encode(&triplet.albedo, shape)?;
        let z0_e = tokenizer::encode(&triplet.relit, shape)?;
        let first_frame = Tensor::from_vec(
            &[shape.height, shape.width, 3],
            triplet.rgb.data()[..shape.height * shape.width * 3].to_vec(),
        )?;
        let z_image = tokenizer::encode_image(&first_frame, shape)?.cast();

        let buffers = build_env_buffers(&triplet.env_target, shape.height, shape.width)?;
        let env_latent = encode_env_latent(&buffers, shape)?;

        let field = plucker_field(
            &triplet.trajectory,
            shape.latent_height(),
            shape.latent_width(),
            shape.spatial,
        )?;
        let grouped: Tensor<T> = group_plucker(&field, shape.temporal)?.cast();
        let fields = [
            assemble_conditioning(&grouped, Chunk::Video)?,
            assemble_conditioning(&grouped, Chunk::Albedo)?,
            assemble_conditioning(&grouped, Chunk::Relit)?,
        ];
        Ok(TrainExample {
            z0: [z0_v.cast(), z0_a.cast(), z0_e.cast()],
            z_image,
            env_latent,
            fields,
            ctx_ids: triplet.descriptor_ids.clone(),
        })
    }
}

/// Noise one example at a fixed sigma: z = z0 + sigma * eps per chunk, then
/// substitute the (perturbed) first-frame condition token and fuse.
pub fn prepare_at_sigma<T: Scalar>(
    ex: &TrainExample<T>,
    sigma: f64,
    sigma_cond: f64,
    ctx_ids: Vec<i64>,
    rng: &mut Rng,
) -> Result<PreparedExample<T>> {
    let mut noisy = Vec::with_capacity(3);
    for z in &ex.z0 {
        let mut zt = z.clone();
        for v in zt.data_mut() {
            *v = v.add(T::from_f64(sigma * rng.gaussian()));
        }
        noisy.push(zt);
    }
    let zv = substitute_condition_token(&noisy[0], &ex.z_image, sigma_cond, rng)?;
    let fused = fuse(&zv, &noisy[1], &noisy[2], &ex.env_latent, &ex.fields)?;
    Ok(PreparedExample { fused, targets: ex.z0.clone(), ctx_ids, sigma })
}

/// One optimization step's loss and gradients over a batch of examples:
/// draw sigma from the log-normal schedule, noise the latents, substitute
/// the condition token, optionally drop context to NULL, and differentiate
/// the joint denoising objective.
pub fn training_step<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    examples: &[&TrainExample<T>],
    noise_cfg: &TrainNoiseConfig,
    rng: &mut Rng,
) -> Result<(f64, ParameterStore<T>)> {
    noise_cfg.validate()?;
    let mut prepared = Vec::with_capacity(examples.len());
    for ex in examples {
        let ctx_ids = if rng.uniform() < noise_cfg.ctx_dropout {
            vec![NULL_ID]
        } else {
            ex.ctx_ids.clone()
        };
        let sigma = (noise_cfg.p_mean + noise_cfg.p_std * rng.gaussian()).exp();
        prepared.push(prepare_at_sigma(ex, sigma, noise_cfg.sigma_cond, ctx_ids, rng)?);
    }
    loss_and_grads(params, cfg, &prepared)
}

/// A denoiser evaluation `D(x; sigma)` over the fused state. Abstracted so
/// tests can substitute oracles and instrumentation.
pub trait Denoiser<T: Scalar> {
    fn denoise(&mut self, x: &FusedLatent<T>, sigma: f64) -> Result<[Tensor<T>; 3]>;
}

/// The trained model under classifier-free guidance: each evaluation blends
/// the conditional branch with a NEGATIVE-context branch. At guidance 1 the
/// negative branch is skipped entirely.
pub struct GuidedDenoiser<'a, T: Scalar> {
    pub params: &'a ParameterStore<T>,
    pub cfg: &'a ModelConfig,
    pub ctx_ids: Vec<i64>,
    pub guidance_scale: f64,
}

impl<T: Scalar> Denoiser<T> for GuidedDenoiser<'_, T> {
    fn denoise(&mut self, x: &FusedLatent<T>, sigma: f64) -> Result<[Tensor<T>; 3]> {
        let d_cond = precondition(self.params, self.cfg, x, &self.ctx_ids, sigma)?;
        if self.guidance_scale == 1.0 {
            return Ok(d_cond);
        }
        let d_neg = precondition(self.params, self.cfg, x, &[NEGATIVE_ID], sigma)?;
        let s = self.guidance_scale;
        Ok([
            cfg_combine(&d_cond[0], &d_neg[0], s),
            cfg_combine(&d_cond[1], &d_neg[1], s),
            cfg_combine(&d_cond[2], &d_neg[2], s),
        ])
    }
}

/// Oracle returning zero for every chunk; the probe for sampler algebra.
pub struct ZeroDenoiser {
    pub l: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl<T: Scalar> Denoiser<T> for ZeroDenoiser {
    fn denoise(&mut self, _x: &FusedLatent<T>, _sigma: f64) -> Result<[Tensor<T>; 3]> {
        Ok([(); 3].map(|_| Tensor::zeros(&[self.l, self.h, self.w, self.c])))
    }
}

/// Deterministic Heun integration of the probability-flow ODE over the
/// Karras schedule. `observer` sees every intermediate state (including the
/// initial one), and `z_cond`, when present, overwrites the video chunk's
/// temporal slice 0 before every denoiser evaluation.
pub fn sample_loop<T: Scalar, D: Denoiser<T>>(
    denoiser: &mut D,
    mut state: [Tensor<T>; 3],
    env_latent: &Tensor<T>,
    fields: &[Tensor<T>; 3],
    z_cond: Option<&Tensor<T>>,
    sigmas: &[f64],
    mut observer: impl FnMut(usize, &[Tensor<T>; 3]),
) -> Result<[Tensor<T>; 3]> {
    if sigmas.len() < 2 {
        return Err(Error::Invalid("schedule needs at least [sigma, 0]".into()));
    }
    let substitute = |chunks: &mut [Tensor<T>; 3]| {
        if let Some(zc) = z_cond {
            let slice = zc.len();
            chunks[0].data_mut()[..slice].copy_from_slice(zc.data());
        }
    };
    observer(0, &state);
    for i in 0..sigmas.len() - 1 {
        let (sig, sig_next) = (sigmas[i], sigmas[i + 1]);
        substitute(&mut state);
        let fused = fuse(&state[0], &state[1], &state[2], env_latent, fields)?;
        let denoised = denoiser.denoise(&fused, sig)?;
        let h = sig_next - sig;
        // Euler proposal in ratio form D + (sig_next/sig)(x - D): identical
        // algebra to x + h (x - D)/sig but exact at sig_next = 0.
        let ratio = sig_next / sig;
        let mut deriv: Vec<Tensor<T>> = Vec::with_capacity(3);
        let mut proposal = state.clone();
        for k in 0..3 {
            let mut d = state[k].clone();
            d.axpy(T::from_f64(-1.0), &denoised[k]);
            let mut p = d.clone();
            p.scale(T::from_f64(ratio));
            p.add_assign(&denoised[k]);
            proposal[k] = p;
            d.scale(T::from_f64(1.0 / sig));
            deriv.push(d);
        }
        if sig_next > 0.0 {
            // second-order correction
            let mut prop = proposal;
            substitute(&mut prop);
            let fused2 = fuse(&prop[0], &prop[1], &prop[2], env_latent, fields)?;
            let denoised2 = denoiser.denoise(&fused2, sig_next)?;
            for k in 0..3 {
                let mut d2 = prop[k].clone();
                d2.axpy(T::from_f64(-1.0), &denoised2[k]);
                d2.scale(T::from_f64(1.0 / sig_next));
                let mut avg = deriv[k].clone();
                avg.add_assign(&d2);
                avg.scale(T::from_f64(0.5));
                state[k].axpy(T::from_f64(h), &avg);
            }
        } else {
            state = proposal;
        }
        observer(i + 1, &state);
    }
    Ok(state)
}

/// Everything the sampler needs besides the model: the conditioning image,
/// the (normalized) trajectory, the target environment, and context ids.
pub struct GenerationInputs<'a> {
    pub input_image: &'a Tensor<f64>,
    pub trajectory: &'a CameraTrajectory,
    pub env_target: &'a EnvMap,
    pub ctx_ids: &'a [i64],
}

/// Generate the three latent chunks from Gaussian noise with classifier-free
/// guidance. Deterministic per seed; decoding is the caller's job.
pub fn sample<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    inputs: &GenerationInputs<'_>,
    scfg: &SamplerConfig,
) -> Result<[Tensor<T>; 3]> {
    scfg.validate()?;
    cfg.validate()?;
    let shape = &cfg.shape;
    if inputs.input_image.shape() != [shape.height, shape.width, 3] {
        return Err(Error::Shape(format!(
            "input image must be [{}, {}, 3], got {:?}",
            shape.height,
            shape.width,
            inputs.input_image.shape()
        )));
    }
    if inputs.trajectory.frame_count() != shape.frames {
        return Err(Error::Shape(format!(
            "trajectory has {} poses, config expects {}",
            inputs.trajectory.frame_count(),
            shape.frames
        )));
    }

    let (l, h, w, c) = cfg.latent_dims();
    let z_image: Tensor<T> = tokenizer::encode_image(inputs.input_image, shape)?.cast();
    let buffers = build_env_buffers(inputs.env_target, shape.height, shape.width)?;
    let env_latent: Tensor<T> = encode_env_latent(&buffers, shape)?;
    let field = plucker_field(inputs.trajectory, h, w, shape.spatial)?;
    let grouped: Tensor<T> = group_plucker(&field, shape.temporal)?.cast();
    let fields = [
        assemble_conditioning(&grouped, Chunk::Video)?,
        assemble_conditioning(&grouped, Chunk::Albedo)?,
        assemble_conditioning(&grouped, Chunk::Relit)?,
    ];

    // fixed condition token for the whole run
    let mut cond_rng = Rng::new(scfg.seed, streams::COND_TOKEN);
    let mut z_cond = z_image.clone();
    for v in z_cond.data_mut() {
        *v = v.add(T::from_f64(scfg.sigma_cond * cond_rng.gaussian()));
    }

    let sigmas = karras_schedule(scfg);
    let mut init_rng = Rng::new(scfg.seed, streams::SAMPLER);
    let state = [(); 3].map(|_| {
        let mut z = Tensor::zeros(&[l, h, w, c]);
        for v in z.data_mut() {
            *v = T::from_f64(sigmas[0] * init_rng.gaussian());
        }
        z
    });

    let mut denoiser = GuidedDenoiser {
        params,
        cfg,
        ctx_ids: inputs.ctx_ids.to_vec(),
        guidance_scale: scfg.guidance_scale,
    };
    sample_loop(
        &mut denoiser,
        state,
        &env_latent,
        &fields,
        Some(&z_cond),
        &sigmas,
        |_, _| {},
    )
}
