//! Lifting posed multi-view RGB-D images into 3D feature clouds.
//!
//! Each view runs through a small trainable convolutional encoder with a
//! two-level feature pyramid, producing coarse (stride 8) and fine (stride 4)
//! token grids. Token centers are unprojected to world-frame 3D points using
//! bilinearly interpolated depth; tokens with no valid depth neighbors or
//! positions outside the workspace are dropped. The surviving tokens across
//! all views form the coarse and fine feature clouds the attention stack
//! consumes.

use crate::geom::{Aabb, Camera, Vec3};
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, TensorId};
use crate::optim::{OptimError, ParamBinding, ParamStore};
use crate::util;
use rand::Rng;
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("view {index}: rgb length {got}, expected H·W·3 = {want}")]
    RgbLength { index: usize, got: usize, want: usize },
    #[error("view {index}: depth length {got}, expected H·W = {want}")]
    DepthLength { index: usize, got: usize, want: usize },
    #[error("view {index}: rgb value {value} outside [0,1]")]
    RgbRange { index: usize, value: f64 },
    #[error("views disagree on image size: {0}×{1} vs {2}×{3}")]
    MixedSizes(usize, usize, usize, usize),
    #[error("image size {h}×{w} not divisible by encoder stride {stride}")]
    StrideMismatch { h: usize, w: usize, stride: usize },
    #[error("no tokens survived depth and workspace filtering; the scene is invisible")]
    EmptyCloud,
    #[error("scene file: bad magic {0:02x?}")]
    BadMagic([u8; 8]),
    #[error("scene file: unsupported version {0}")]
    BadVersion(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

// ── Camera views ────────────────────────────────────────────────────

/// One posed RGB-D image. `rgb` is row-major `H×W×3` in `[0,1]`; `depth` is
/// row-major `H×W` camera-frame z in meters with `0` marking invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView<F> {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<F>,
    pub depth: Vec<F>,
    pub camera: Camera<F>,
}

impl<F: Scalar> CameraView<F> {
    pub fn new(
        height: usize,
        width: usize,
        rgb: Vec<F>,
        depth: Vec<F>,
        camera: Camera<F>,
    ) -> Result<Self, SceneError> {
        let view = Self { height, width, rgb, depth, camera };
        view.validate(0)?;
        Ok(view)
    }

    fn validate(&self, index: usize) -> Result<(), SceneError> {
        let hw = self.height * self.width;
        if self.rgb.len() != hw * 3 {
            return Err(SceneError::RgbLength { index, got: self.rgb.len(), want: hw * 3 });
        }
        if self.depth.len() != hw {
            return Err(SceneError::DepthLength { index, got: self.depth.len(), want: hw });
        }
        for v in &self.rgb {
            if *v < F::zero() || *v > F::one() {
                return Err(SceneError::RgbRange { index, value: v.to_f64().unwrap_or(f64::NAN) });
            }
        }
        Ok(())
    }

    /// Channel-first `[4, H, W]` buffer (r, g, b, depth) for the encoder.
    pub fn to_chw(&self) -> Vec<F> {
        let hw = self.height * self.width;
        let mut out = vec![F::zero(); 4 * hw];
        for p in 0..hw {
            out[p] = self.rgb[3 * p];
            out[hw + p] = self.rgb[3 * p + 1];
            out[2 * hw + p] = self.rgb[3 * p + 2];
            out[3 * hw + p] = self.depth[p];
        }
        out
    }
}

/// A multi-view observation of one scene.
pub type Observation<F> = Vec<CameraView<F>>;

fn check_uniform_sizes<F: Scalar>(views: &[CameraView<F>]) -> Result<(usize, usize), SceneError> {
    let (h, w) = (views[0].height, views[0].width);
    for v in views {
        if v.height != h || v.width != w {
            return Err(SceneError::MixedSizes(h, w, v.height, v.width));
        }
    }
    Ok((h, w))
}

// ── Encoder ─────────────────────────────────────────────────────────

/// Convolutional encoder: four stride-2 stages and a two-level top-down
/// pyramid producing fine (stride 4) and coarse (stride 8) feature maps of
/// width `d`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Embedding dimension shared with the attention stack.
    pub d: usize,
    /// Channel widths of the first three conv stages (the fourth is `d`).
    pub widths: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 60, widths: [16, 32, 64] }
    }
}

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 4;
/// RGB + depth input planes.
pub const IN_CHANNELS: usize = 4;

/// Uniform He-style initialization over ±√(1/fan_in).
pub fn linear_init<F: Scalar>(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<F> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect()
}

/// Register the encoder's parameters under `enc.*`.
pub fn register_encoder_params<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) -> Result<(), OptimError> {
    let chain = [IN_CHANNELS, cfg.widths[0], cfg.widths[1], cfg.widths[2], cfg.d];
    for i in 0..4 {
        let (ci, co) = (chain[i], chain[i + 1]);
        let shape = [co, ci, 3, 3];
        let n = co * ci * 9;
        store.add(&format!("enc.stage{}.w", i + 1), &shape, linear_init(rng, ci * 9, n))?;
        store.add(&format!("enc.stage{}.b", i + 1), &[co], vec![F::zero(); co])?;
    }
    // 1×1 pyramid laterals: stage4 → top, stage3 → coarse, stage2 → fine.
    for (name, ci) in [("top", cfg.d), ("coarse", cfg.widths[2]), ("fine", cfg.widths[1])] {
        store.add(
            &format!("enc.lat_{name}.w"),
            &[cfg.d, ci, 1, 1],
            linear_init(rng, ci, cfg.d * ci),
        )?;
        store.add(&format!("enc.lat_{name}.b"), &[cfg.d], vec![F::zero(); cfg.d])?;
    }
    Ok(())
}

/// Encoder forward pass for one view. Returns `(coarse, fine)` feature maps
/// with shapes `[d, H/8, W/8]` and `[d, H/4, W/4]`.
pub fn encode_view<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    view_chw: TensorId,
) -> Result<(TensorId, TensorId), SceneError> {
    let conv = |g: &mut Graph<F>, x, name: &str, stride, pad| -> Result<TensorId, SceneError> {
        let w = binding.id(&format!("enc.{name}.w"))?;
        let b = binding.id(&format!("enc.{name}.b"))?;
        Ok(g.conv2d(x, w, b, stride, pad)?)
    };
    let s1 = conv(g, view_chw, "stage1", 2, 1)?;
    let s1 = g.gelu(s1)?;
    let s2 = conv(g, s1, "stage2", 2, 1)?;
    let s2 = g.gelu(s2)?;
    let s3 = conv(g, s2, "stage3", 2, 1)?;
    let s3 = g.gelu(s3)?;
    let s4 = conv(g, s3, "stage4", 2, 1)?;
    let s4 = g.gelu(s4)?;

    let top = conv(g, s4, "lat_top", 1, 0)?;
    let lat_c = conv(g, s3, "lat_coarse", 1, 0)?;
    let top_up = g.upsample_nearest2(top)?;
    let coarse = g.add(lat_c, top_up)?;
    let lat_f = conv(g, s2, "lat_fine", 1, 0)?;
    let coarse_up = g.upsample_nearest2(coarse)?;
    let fine = g.add(lat_f, coarse_up)?;
    Ok((coarse, fine))
}

// ── Depth lifting ───────────────────────────────────────────────────

/// Result of lifting one view's token grid to 3D.
#[derive(Debug, Clone)]
pub struct TokenLift<F> {
    /// Token-grid indices (row-major) of the surviving tokens.
    pub kept: Vec<usize>,
    /// World positions of the surviving tokens, aligned with `kept`.
    pub positions: Vec<Vec3<F>>,
    /// Tokens dropped for lack of any valid depth neighbor.
    pub dropped_invalid: usize,
    /// Tokens dropped for unprojecting outside the workspace.
    pub dropped_outside: usize,
}

/// Bilinear depth over valid (> 0) neighbors only. Returns `None` when no
/// in-bounds neighbor carries valid depth.
pub fn interpolate_depth<F: Scalar>(view: &CameraView<F>, u: F, v: F) -> Option<F> {
    let u0f = u.floor();
    let v0f = v.floor();
    let fu = u - u0f;
    let fv = v - v0f;
    let u0 = u0f.to_f64()? as isize;
    let v0 = v0f.to_f64()? as isize;
    let mut acc = F::zero();
    let mut wsum = F::zero();
    for (dv, du, w) in [
        (0, 0, (F::one() - fu) * (F::one() - fv)),
        (0, 1, fu * (F::one() - fv)),
        (1, 0, (F::one() - fu) * fv),
        (1, 1, fu * fv),
    ] {
        let (py, px) = (v0 + dv, u0 + du);
        if py < 0 || px < 0 || py >= view.height as isize || px >= view.width as isize {
            continue;
        }
        let d = view.depth[py as usize * view.width + px as usize];
        if d > F::zero() {
            acc = acc + w * d;
            wsum = wsum + w;
        }
    }
    if wsum > F::zero() {
        Some(acc / wsum)
    } else {
        None
    }
}

/// Pixel coordinate of the center of token `(tx, ty)` at a given stride.
pub fn token_center<F: Scalar>(t: usize, stride: usize) -> F {
    F::from_f64((t as f64 + 0.5) * stride as f64 - 0.5)
}

/// Unproject every token of a view's grid at `stride`, dropping tokens with
/// no valid depth or outside the workspace.
pub fn lift_tokens<F: Scalar>(
    view: &CameraView<F>,
    stride: usize,
    workspace: &Aabb<F>,
) -> Result<TokenLift<F>, SceneError> {
    if view.height % stride != 0 || view.width % stride != 0 {
        return Err(SceneError::StrideMismatch { h: view.height, w: view.width, stride });
    }
    let (gh, gw) = (view.height / stride, view.width / stride);
    let mut lift = TokenLift {
        kept: Vec::with_capacity(gh * gw),
        positions: Vec::with_capacity(gh * gw),
        dropped_invalid: 0,
        dropped_outside: 0,
    };
    for ty in 0..gh {
        for tx in 0..gw {
            let u = token_center::<F>(tx, stride);
            let v = token_center::<F>(ty, stride);
            match interpolate_depth(view, u, v) {
                None => lift.dropped_invalid += 1,
                Some(depth) => {
                    let p = view.camera.unproject(u, v, depth);
                    if workspace.contains(p) {
                        lift.kept.push(ty * gw + tx);
                        lift.positions.push(p);
                    } else {
                        lift.dropped_outside += 1;
                    }
                }
            }
        }
    }
    Ok(lift)
}

// ── Feature clouds ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudScale {
    Coarse,
    Fine,
}

/// A 3D feature cloud whose features live in a [`Graph`]: one world position
/// and source-view index per feature row.
#[derive(Debug, Clone)]
pub struct CloudTokens<F> {
    pub scale: CloudScale,
    pub positions: Vec<Vec3<F>>,
    pub view_index: Vec<usize>,
    /// `[N, d]` feature rows in the graph, aligned with `positions`.
    pub features: TensorId,
}

impl<F: Scalar> CloudTokens<F> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Encode all views and lift both token scales into feature clouds.
///
/// Per-view warning counts (dropped tokens) are summed into the returned
/// `drop` totals; an entirely empty cloud at either scale is an error.
pub struct BuiltClouds<F> {
    pub coarse: CloudTokens<F>,
    pub fine: CloudTokens<F>,
    pub dropped_invalid: usize,
    pub dropped_outside: usize,
}

pub fn build_feature_clouds<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    views: &[CameraView<F>],
    workspace: &Aabb<F>,
) -> Result<BuiltClouds<F>, SceneError> {
    if views.is_empty() {
        return Err(SceneError::EmptyCloud);
    }
    check_uniform_sizes(views)?;
    let mut coarse_parts = Vec::new();
    let mut fine_parts = Vec::new();
    let mut coarse_pos = Vec::new();
    let mut fine_pos = Vec::new();
    let mut coarse_view = Vec::new();
    let mut fine_view = Vec::new();
    let mut dropped_invalid = 0;
    let mut dropped_outside = 0;
    for (vi, view) in views.iter().enumerate() {
        let chw = g.constant(&[IN_CHANNELS, view.height, view.width], view.to_chw())?;
        let (coarse_map, fine_map) = encode_view(g, binding, chw)?;
        for (map, stride, parts, pos, view_ix) in [
            (coarse_map, COARSE_STRIDE, &mut coarse_parts, &mut coarse_pos, &mut coarse_view),
            (fine_map, FINE_STRIDE, &mut fine_parts, &mut fine_pos, &mut fine_view),
        ] {
            let lift = lift_tokens(view, stride, workspace)?;
            dropped_invalid += lift.dropped_invalid;
            dropped_outside += lift.dropped_outside;
            if lift.kept.is_empty() {
                continue;
            }
            let rows = g.chw_to_rows(map)?;
            parts.push(g.gather_rows(rows, &lift.kept)?);
            pos.extend_from_slice(&lift.positions);
            view_ix.extend(std::iter::repeat(vi).take(lift.kept.len()));
        }
    }
    if coarse_parts.is_empty() || fine_parts.is_empty() {
        return Err(SceneError::EmptyCloud);
    }
    let coarse = CloudTokens {
        scale: CloudScale::Coarse,
        features: g.concat_rows(&coarse_parts)?,
        positions: coarse_pos,
        view_index: coarse_view,
    };
    let fine = CloudTokens {
        scale: CloudScale::Fine,
        features: g.concat_rows(&fine_parts)?,
        positions: fine_pos,
        view_index: fine_view,
    };
    Ok(BuiltClouds { coarse, fine, dropped_invalid, dropped_outside })
}

// ── Local fine selection ────────────────────────────────────────────

/// Indices of the `k` cloud points nearest to `center`, ordered by
/// `(distance, index)`. When `k` exceeds the cloud size the whole cloud is
/// returned and `clamped` is set.
#[derive(Debug, Clone)]
pub struct LocalSelection {
    pub indices: Vec<usize>,
    pub clamped: bool,
}

pub fn select_local_fine<F: Scalar>(
    positions: &[Vec3<F>],
    center: Vec3<F>,
    k: usize,
) -> LocalSelection {
    let n = positions.len();
    let clamped = k > n;
    let k = k.min(n);
    let mut order: Vec<(F, usize)> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| ((*p - center).dot(*p - center), i))
        .collect();
    let cmp = |a: &(F, usize), b: &(F, usize)| {
        a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
    };
    if k < n {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    LocalSelection { indices: order.into_iter().map(|(_, i)| i).collect(), clamped }
}

// ── Scene file format ───────────────────────────────────────────────

pub const SCENE_MAGIC: [u8; 8] = *b"GHOSTSCN";
pub const SCENE_VERSION: u32 = 1;

/// Serialize views as a versioned little-endian block: per view a header
/// (H, W), 9 intrinsic doubles, 12 extrinsic doubles (row-major rotation then
/// translation), then RGB and depth payloads.
pub fn write_scene<F: Scalar, W: Write>(w: &mut W, views: &[CameraView<F>]) -> Result<(), SceneError> {
    w.write_all(&SCENE_MAGIC)?;
    util::write_u32(w, SCENE_VERSION)?;
    util::write_u32(w, views.len() as u32)?;
    for v in views {
        util::write_u32(w, v.height as u32)?;
        util::write_u32(w, v.width as u32)?;
        let intr: Vec<f64> = v.camera.intrinsics.flat().iter().map(|x| x.to_f64().unwrap()).collect();
        util::write_f64_slice(w, &intr)?;
        let rot = v.camera.cam_to_world.rotation.flat();
        let t = v.camera.cam_to_world.translation;
        let mut ext: Vec<f64> = rot.iter().map(|x| x.to_f64().unwrap()).collect();
        ext.extend([t.x.to_f64().unwrap(), t.y.to_f64().unwrap(), t.z.to_f64().unwrap()]);
        util::write_f64_slice(w, &ext)?;
        let rgb: Vec<f64> = v.rgb.iter().map(|x| x.to_f64().unwrap()).collect();
        util::write_f64_slice(w, &rgb)?;
        let depth: Vec<f64> = v.depth.iter().map(|x| x.to_f64().unwrap()).collect();
        util::write_f64_slice(w, &depth)?;
    }
    Ok(())
}

pub fn read_scene<F: Scalar, R: Read>(r: &mut R) -> Result<Vec<CameraView<F>>, SceneError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != SCENE_MAGIC {
        return Err(SceneError::BadMagic(magic));
    }
    let version = util::read_u32(r)?;
    if version != SCENE_VERSION {
        return Err(SceneError::BadVersion(version));
    }
    let n_views = util::read_u32(r)? as usize;
    let mut views = Vec::with_capacity(n_views);
    for index in 0..n_views {
        let h = util::read_u32(r)? as usize;
        let w = util::read_u32(r)? as usize;
        let intr = util::read_f64_vec(r, 9)?;
        let ext = util::read_f64_vec(r, 12)?;
        let rgb = util::read_f64_vec(r, h * w * 3)?;
        let depth = util::read_f64_vec(r, h * w)?;
        let intrinsics = crate::geom::Mat3::from_flat(core::array::from_fn(|i| F::from_f64(intr[i])));
        let rotation = crate::geom::Mat3::from_flat(core::array::from_fn(|i| F::from_f64(ext[i])));
        let translation = Vec3::new(F::from_f64(ext[9]), F::from_f64(ext[10]), F::from_f64(ext[11]));
        let camera = Camera::new(
            intrinsics,
            crate::geom::RigidTransform::new(rotation, translation),
        )?;
        let view = CameraView {
            height: h,
            width: w,
            rgb: rgb.into_iter().map(F::from_f64).collect(),
            depth: depth.into_iter().map(F::from_f64).collect(),
            camera,
        };
        view.validate(index)?;
        views.push(view);
    }
    Ok(views)
}
