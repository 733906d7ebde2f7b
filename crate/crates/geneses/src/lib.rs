//! Generative speech enhancement and separation via latent rectified flow
//! matching: a multi-modal diffusion transformer predicts the velocity field
//! that transports Gaussian noise to stacked two-speaker VAE latents,
//! conditioned on features extracted from the degraded mixture.

pub mod tensor;
