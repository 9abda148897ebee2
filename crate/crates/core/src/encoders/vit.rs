use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{normal_tensor, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const VIT_PREFIX: &str = "vit.";
pub const HEAD_PREFIX: &str = "head.";
/// Weight std inside transformer blocks; small so each block starts near the identity.
pub const BLOCK_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the shared embedding space (`D_e`).
    pub embed_out: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 2,
            embed_out: 64,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.channels == 0 || self.embed_out == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("channels, embed_out and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Global and local features of one image batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DualViewFeatures<T: Scalar> {
    /// `[B, D]` class-token feature.
    pub f_cls: Tensor<T>,
    /// `[B, N, D]` patch-token features.
    pub f_patch: Tensor<T>,
    /// `[B, D_e]` projected class-token feature.
    pub f_cls_emb: Tensor<T>,
    /// `[B, N, D_e]` projected patch features.
    pub f_patch_emb: Tensor<T>,
}

/// [`DualViewFeatures`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DualView<'t, T: Scalar> {
    pub f_cls: Var<'t, T>,
    pub f_patch: Var<'t, T>,
    pub f_cls_emb: Var<'t, T>,
    pub f_patch_emb: Var<'t, T>,
}

impl<T: Scalar> DualView<'_, T> {
    pub fn to_features(&self) -> DualViewFeatures<T> {
        DualViewFeatures {
            f_cls: self.f_cls.value(),
            f_patch: self.f_patch.value(),
            f_cls_emb: self.f_cls_emb.value(),
            f_patch_emb: self.f_patch_emb.value(),
        }
    }
}

/// Image tower parameters under `vit.`.
pub fn init_vit<T: Scalar, R: Rng + ?Sized>(cfg: &VitConfig, rng: &mut R) -> ParamStore<T> {
    let d = cfg.embed_dim;
    let mut s = ParamStore::new();
    nn::init_linear(&mut s, rng, "vit.patch_embed", cfg.patch_dim(), d, true, None);
    s.insert("vit.cls_token", normal_tensor(rng, &[1, d], 0.02));
    s.insert("vit.pos_embed", normal_tensor(rng, &[cfg.seq_len(), d], 0.02));
    for l in 0..cfg.depth {
        nn::init_block(&mut s, rng, &format!("vit.blocks.{l}"), d, d * cfg.mlp_ratio, Some(BLOCK_INIT_STD));
    }
    nn::init_layer_norm(&mut s, "vit.norm", d);
    s
}

/// Two-layer embedding head under `head.` mapping `D -> D_e`.
pub fn init_head<T: Scalar, R: Rng + ?Sized>(cfg: &VitConfig, rng: &mut R) -> ParamStore<T> {
    let mut s = ParamStore::new();
    nn::init_linear(&mut s, rng, "head.fc1", cfg.embed_dim, cfg.embed_dim, true, None);
    nn::init_linear(&mut s, rng, "head.fc2", cfg.embed_dim, cfg.embed_out, true, None);
    s
}

/// Rearranges `[B, C, H, W]` images into `[B, N, P·P·C]` patch vectors,
/// patches in row-major grid order, each flattened as `(channel, row, col)`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::config(format!(
            "image batch shape {s:?} does not match [B, {}, {}, {}]",
            cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    let (b, c, hw, p, g) = (s[0], cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let data = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for py in 0..p {
                        let row = ((bi * c + ch) * hw + gy * p + py) * hw + gx * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new([b, cfg.num_patches(), cfg.patch_dim()], out)?)
}

fn embed_head<'t, T: Scalar>(p: &Bound<'t, T>, x: Var<'t, T>, identity: bool) -> Result<Var<'t, T>> {
    if identity {
        return Ok(x);
    }
    let h = nn::linear(p, "head.fc1", x)?.gelu();
    nn::linear(p, "head.fc2", h)
}

/// Runs the transformer on patch vectors `[B, N, P·P·C]`, returning `(f_cls, f_patch)`.
pub fn vit_forward<'t, T: Scalar>(
    cfg: &VitConfig,
    p: &Bound<'t, T>,
    patches: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = patches.tape();
    let shape = patches.shape();
    let (b, n) = (shape[0], cfg.num_patches());
    if shape[1..] != [n, cfg.patch_dim()] {
        return Err(Error::config(format!(
            "patch tensor {shape:?} does not match [B, {n}, {}]",
            cfg.patch_dim()
        )));
    }
    let d = cfg.embed_dim;
    let x_p = nn::linear(p, "vit.patch_embed", patches)?;
    let cls = p
        .get("vit.cls_token")?
        .index_select(&vec![0; b])?
        .reshape([b, 1, d])?;
    let mut z = tape.concat(&[cls, x_p], 1)?.add(p.get("vit.pos_embed")?)?;
    for l in 0..cfg.depth {
        z = nn::block(p, &format!("vit.blocks.{l}"), z, cfg.heads)?;
    }
    let z = nn::layer_norm(p, "vit.norm", z)?;
    let f_cls = z.narrow(1, 0, 1)?.reshape([b, d])?;
    let f_patch = z.narrow(1, 1, n)?;
    Ok((f_cls, f_patch))
}

/// Full image tower: transformer plus the shared embedding head.
///
/// `params` must hold `vit.*` and (unless `identity_head`) `head.*` entries.
pub fn encode_image<'t, T: Scalar>(
    cfg: &VitConfig,
    params: &Bound<'t, T>,
    patches: Var<'t, T>,
    identity_head: bool,
) -> Result<DualView<'t, T>> {
    if identity_head && cfg.embed_out != cfg.embed_dim {
        return Err(Error::config("identity head requires embed_out == embed_dim"));
    }
    let (f_cls, f_patch) = vit_forward(cfg, params, patches)?;
    Ok(DualView {
        f_cls,
        f_patch,
        f_cls_emb: embed_head(params, f_cls, identity_head)?,
        f_patch_emb: embed_head(params, f_patch, identity_head)?,
    })
}

/// Convenience wrapper evaluating [`encode_image`] without gradients.
pub fn encode_image_values<T: Scalar>(
    cfg: &VitConfig,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    identity_head: bool,
) -> Result<DualViewFeatures<T>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| false);
    let patches = tape.constant(&patchify(images, cfg)?);
    Ok(encode_image(cfg, &bound, patches, identity_head)?.to_features())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(cfg: &VitConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = init_vit(cfg, &mut rng);
        for (k, v) in init_head::<f64, _>(cfg, &mut rng).iter() {
            s.insert(k.clone(), v.clone());
        }
        s
    }

    fn images(b: usize, cfg: &VitConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            [b, cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_geometry() {
        let cfg = VitConfig::default();
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.seq_len(), 17);
        let bad = VitConfig {
            patch_size: 7,
            ..cfg
        };
        assert!(bad.validate().is_err());
        let bad = VitConfig { heads: 3, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shapes() {
        let cfg = VitConfig::default();
        let f = encode_image_values(&cfg, &model(&cfg, 1), &images(2, &cfg, 2), false).unwrap();
        assert_eq!(f.f_cls.shape(), &[2, 64]);
        assert_eq!(f.f_patch.shape(), &[2, 16, 64]);
        assert_eq!(f.f_cls_emb.shape(), &[2, 64]);
        assert_eq!(f.f_patch_emb.shape(), &[2, 16, 64]);
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let cfg = VitConfig::default();
        let imgs = Tensor::<f64>::zeros([1, 3, 16, 16]);
        assert!(encode_image_values(&cfg, &model(&cfg, 1), &imgs, false).is_err());
    }

    #[test]
    fn patchify_layout() {
        let cfg = VitConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            ..VitConfig::default()
        };
        let img = Tensor::<f64>::from_f64([1, 1, 4, 4], &(0..16).map(|x| x as f64).collect::<Vec<_>>()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(p.row(0), &[0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]);
    }

    #[test]
    fn zero_depth_is_class_token_plus_position() {
        let cfg = VitConfig {
            depth: 0,
            ..VitConfig::default()
        };
        let params = model(&cfg, 5);
        let f = encode_image_values(&cfg, &params, &images(2, &cfg, 6), false).unwrap();
        // f_cls = LN(cls + pos[0]) with the final norm's affine parameters.
        let cls = params.get("vit.cls_token").unwrap().data();
        let pos = params.get("vit.pos_embed").unwrap().row(0);
        let z: Vec<f64> = cls.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mean = z.iter().sum::<f64>() / 64.0;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        for b in 0..2 {
            for (j, &v) in f.f_cls.row(b).iter().enumerate() {
                let want = (z[j] - mean) / (var + 1e-5).sqrt();
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        let cfg = VitConfig::default();
        let params = model(&cfg, 8);
        let imgs = images(3, &cfg, 9);
        let per = 3 * 32 * 32;
        let mut swapped = imgs.data().to_vec();
        let (a, b) = swapped.split_at_mut(per);
        a.swap_with_slice(&mut b[..per]);
        let swapped = Tensor::new([3, 3, 32, 32], swapped).unwrap();
        let f1 = encode_image_values(&cfg, &params, &imgs, false).unwrap();
        let f2 = encode_image_values(&cfg, &params, &swapped, false).unwrap();
        assert_eq!(f1.f_cls_emb.row(0), f2.f_cls_emb.row(1));
        assert_eq!(f1.f_cls_emb.row(1), f2.f_cls_emb.row(0));
        assert_eq!(f1.f_patch_emb.row(2), f2.f_patch_emb.row(2));
    }

    #[test]
    fn identity_head_hook() {
        let cfg = VitConfig::default();
        let f = encode_image_values(&cfg, &model(&cfg, 3), &images(2, &cfg, 4), true).unwrap();
        assert!(f.f_cls_emb.bit_eq(&f.f_cls));
        assert!(f.f_patch_emb.bit_eq(&f.f_patch));
    }
}
