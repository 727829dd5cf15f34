//! One-pass tracking: context cropping with bilinear resampling, input
//! normalization, cosine-window motion prior, and the frame loop that keeps
//! the template fixed for the whole sequence.

use std::f64::consts::PI;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::head::{argmax_cell, decode_at, HeadOutput};
use crate::model::LightFc;
use crate::tensor::Tensor;

/// Where a square crop was taken from, with everything needed to map results
/// back into the source frame.
#[derive(Debug, Clone)]
pub struct CropGeometry {
    /// Crop center in frame pixels.
    pub center: (f64, f64),
    /// Crop side length in frame pixels.
    pub side: f64,
    /// Output resolution the crop was resampled to.
    pub out_size: usize,
    /// Per-channel fill used outside frame bounds.
    pub pad_value: [f32; 3],
    pub frame_w: usize,
    pub frame_h: usize,
}

impl CropGeometry {
    /// Output pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    fn validate(&self) -> Result<()> {
        if !(self.side.is_finite() && self.side > 0.0) || self.out_size == 0 {
            return Err(Error::Input(format!(
                "degenerate crop geometry: side {}, out {}",
                self.side, self.out_size
            )));
        }
        if self.frame_w == 0 || self.frame_h == 0 {
            return Err(Error::Input("crop geometry has an empty frame".into()));
        }
        Ok(())
    }
}

/// Cut a square `context_factor * sqrt(w*h)` region around the box center and
/// resample it to `out_size` x `out_size` with bilinear interpolation, filling
/// out-of-frame taps with the frame's channel means. Output pixel (i, j)
/// samples the frame at `origin + (j + 0.5) * side/out - 0.5`.
pub fn crop_region(
    frame: &Tensor,
    around: &BBox,
    context_factor: f64,
    out_size: usize,
) -> Result<(Tensor, CropGeometry)> {
    let (n, c, fh, fw) = frame.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("crop wants a (1, 3, h, w) frame, got {:?}", frame.shape())));
    }
    if !around.valid() {
        return Err(Error::Input(format!("cannot crop around degenerate box {around:?}")));
    }
    if !(context_factor.is_finite() && context_factor > 0.0) || out_size == 0 {
        return Err(Error::Input(format!(
            "bad crop parameters: factor {context_factor}, out {out_size}"
        )));
    }
    let side = context_factor * around.area().sqrt();
    let means = frame.global_avg_pool();
    let pad = [means.at(0, 0, 0, 0), means.at(0, 1, 0, 0), means.at(0, 2, 0, 0)];
    let geom = CropGeometry {
        center: (around.cx(), around.cy()),
        side,
        out_size,
        pad_value: pad,
        frame_w: fw,
        frame_h: fh,
    };
    geom.validate()?;

    let x0 = around.cx() - side / 2.0;
    let y0 = around.cy() - side / 2.0;
    let step = side / out_size as f64;
    let mut patch = Tensor::zeros(1, 3, out_size, out_size)?;
    for ch in 0..3 {
        let fill = pad[ch] as f64;
        let tap = |yy: isize, xx: isize| -> f64 {
            if yy < 0 || xx < 0 || yy >= fh as isize || xx >= fw as isize {
                fill
            } else {
                frame.at(0, ch, yy as usize, xx as usize) as f64
            }
        };
        for i in 0..out_size {
            let sy = y0 + (i as f64 + 0.5) * step - 0.5;
            let ty = sy.floor();
            let dy = sy - ty;
            let ty = ty as isize;
            for j in 0..out_size {
                let sx = x0 + (j as f64 + 0.5) * step - 0.5;
                let tx = sx.floor();
                let dx = sx - tx;
                let tx = tx as isize;
                let v = tap(ty, tx) * (1.0 - dx) * (1.0 - dy)
                    + tap(ty, tx + 1) * dx * (1.0 - dy)
                    + tap(ty + 1, tx) * (1.0 - dx) * dy
                    + tap(ty + 1, tx + 1) * dx * dy;
                patch.set(0, ch, i, j, v as f32);
            }
        }
    }
    Ok((patch, geom))
}

/// Map a box in normalized crop coordinates ([0,1] per axis) back into frame
/// pixels and clamp it inside the frame with at least 1 px extent.
pub fn map_box_to_image(norm: &BBox, geom: &CropGeometry) -> Result<BBox> {
    geom.validate()?;
    if !norm.valid() {
        return Err(Error::Input(format!("cannot map degenerate box {norm:?}")));
    }
    let x0 = geom.center.0 - geom.side / 2.0;
    let y0 = geom.center.1 - geom.side / 2.0;
    let raw = BBox::new(
        x0 + norm.x * geom.side,
        y0 + norm.y * geom.side,
        norm.w * geom.side,
        norm.h * geom.side,
    );
    Ok(clip_box_to_frame(&raw, geom.frame_w, geom.frame_h))
}

/// Clamp a box inside the frame, keeping at least 1 px of width and height.
pub fn clip_box_to_frame(b: &BBox, frame_w: usize, frame_h: usize) -> BBox {
    let fw = frame_w as f64;
    let fh = frame_h as f64;
    let w = b.w.clamp(1.0, fw);
    let h = b.h.clamp(1.0, fh);
    BBox::new(b.x.clamp(0.0, fw - w), b.y.clamp(0.0, fh - h), w, h)
}

/// Scale pixels into normalized units: `(v - mean) / std` per channel.
pub fn normalize(patch: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    let (n, c, h, w) = patch.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("normalize wants (1, 3, h, w), got {:?}", patch.shape())));
    }
    if std.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Input(format!("normalize stds must be positive, got {std:?}")));
    }
    let mut out = patch.clone();
    let hw = h * w;
    for ch in 0..3 {
        let base = ch * hw;
        for v in &mut out.data_mut()[base..base + hw] {
            *v = ((*v as f64 - mean[ch]) / std[ch]) as f32;
        }
    }
    Ok(out)
}

/// Periodic cosine taper without zero endpoints:
/// `w[i] = 0.5 * (1 - cos(2 pi (i+1) / (n+1)))`.
pub fn hann1d(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 * (1.0 - (2.0 * PI * (i + 1) as f64 / (n + 1) as f64).cos())) as f32)
        .collect()
}

/// Outer product of two 1-D tapers as a (1, 1, h, w) map.
pub fn hann2d(h: usize, w: usize) -> Result<Tensor> {
    let (wy, wx) = (hann1d(h), hann1d(w));
    let mut out = Tensor::zeros(1, 1, h, w)?;
    for i in 0..h {
        for j in 0..w {
            out.set(0, 0, i, j, wy[i] * wx[j]);
        }
    }
    Ok(out)
}

/// Blend a motion prior into a response map: `(1 - weight) * response +
/// weight * window`.
pub fn hanning_penalty(response: &Tensor, window: &Tensor, weight: f64) -> Result<Tensor> {
    if response.shape() != window.shape() {
        return Err(Error::Shape(format!(
            "window {:?} does not match response {:?}",
            window.shape(),
            response.shape()
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Input(format!("window weight {weight} outside [0,1]")));
    }
    let mut out = response.clone();
    for (v, &w) in out.data_mut().iter_mut().zip(window.data()) {
        *v = ((1.0 - weight) * *v as f64 + weight * w as f64) as f32;
    }
    Ok(out)
}

/// Pick the peak of the window-blended response and decode the box there.
/// Returns the box in normalized crop coordinates plus the blended peak value.
pub fn decode_windowed(out: &HeadOutput, window: &Tensor, weight: f64) -> Result<(BBox, f32)> {
    let blended = hanning_penalty(&out.response.sigmoid(), window, weight)?;
    let (row, col) = argmax_cell(&blended)?;
    Ok((decode_at(out, row, col)?, blended.at(0, 0, row, col)))
}

/// Per-sequence tracking state. The template features are computed once at
/// init and never touched again; only the box estimate evolves.
#[derive(Debug)]
pub struct TrackerState<'m> {
    pub model: &'m LightFc,
    pub bbox: BBox,
    pub z_feat: Tensor,
    pub last_geom: CropGeometry,
    pub window: Tensor,
}

impl<'m> TrackerState<'m> {
    pub fn init(model: &'m LightFc, frame: &Tensor, init_box: &BBox) -> Result<Self> {
        let cfg = &model.cfg;
        let (patch, geom) = crop_region(frame, init_box, cfg.template_factor, cfg.template_size)?;
        let z_feat = model.template_features(&normalize(&patch, &cfg.norm_mean, &cfg.norm_std)?)?;
        let s = cfg.search_feat_side();
        Ok(TrackerState {
            model,
            bbox: clip_box_to_frame(init_box, frame.w(), frame.h()),
            z_feat,
            last_geom: geom,
            window: hann2d(s, s)?,
        })
    }

    /// One step of the loop: crop around the previous box, run the model,
    /// decode under the window prior, and map back into the frame.
    pub fn track(&mut self, frame: &Tensor) -> Result<(BBox, f32)> {
        let cfg = &self.model.cfg;
        let (patch, geom) = crop_region(frame, &self.bbox, cfg.search_factor, cfg.search_size)?;
        let x_feat = self.model.search_features(&normalize(&patch, &cfg.norm_mean, &cfg.norm_std)?)?;
        let out = self.model.forward(&self.z_feat, &x_feat)?;
        let (norm_box, score) = decode_windowed(&out, &self.window, cfg.window_weight)?;
        self.bbox = map_box_to_image(&norm_box, &geom)?;
        self.last_geom = geom;
        Ok((self.bbox, score))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::init::{uniform, Prng};
    use rand::SeedableRng;

    fn gradient_frame(h: usize, w: usize) -> Tensor {
        // linear ramp per channel; bilinear resampling of a linear function
        // reproduces it exactly wherever no padding taps are involved
        let mut f = Tensor::zeros(1, 3, h, w).unwrap();
        let coef = [(0.2, 0.003, 0.001), (0.1, -0.002, 0.004), (0.5, 0.001, -0.003)];
        for (ch, (a, bx, by)) in coef.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    f.set(0, ch, y, x, (a + bx * x as f64 + by * y as f64) as f32);
                }
            }
        }
        f
    }

    fn frame_linear(ch: usize, x: f64, y: f64) -> f64 {
        let coef = [(0.2, 0.003, 0.001), (0.1, -0.002, 0.004), (0.5, 0.001, -0.003)];
        let (a, bx, by) = coef[ch];
        a + bx * x + by * y
    }

    #[test]
    fn resampling_matches_independent_bilinear_probes() {
        let frame = gradient_frame(60, 80);
        let b = BBox::new(30.0, 20.0, 16.0, 9.0); // side = 2 * 12 = 24, fully inside
        let (patch, geom) = crop_region(&frame, &b, 2.0, 32).unwrap();
        assert_eq!(patch.shape(), (1, 3, 32, 32));
        assert!((geom.side - 24.0).abs() < 1e-12);
        let x0 = geom.center.0 - geom.side / 2.0;
        let y0 = geom.center.1 - geom.side / 2.0;
        let step = geom.side / 32.0;
        for &(ch, i, j) in &[(0, 0, 0), (1, 31, 31), (2, 16, 7), (0, 5, 28), (1, 20, 3)] {
            let sx = x0 + (j as f64 + 0.5) * step - 0.5;
            let sy = y0 + (i as f64 + 0.5) * step - 0.5;
            let want = frame_linear(ch, sx, sy);
            let got = patch.at(0, ch, i, j) as f64;
            assert!((got - want).abs() <= 1e-4, "({ch},{i},{j}): {got} vs {want}");
        }
    }

    #[test]
    fn interior_crop_ignores_the_padding_value() {
        // embed the same frame into a larger canvas of wild filler; an
        // interior crop must come out identical because no tap leaves the
        // original pixels even though the channel means differ wildly
        let frame = gradient_frame(40, 40);
        let b = BBox::new(14.0, 14.0, 12.0, 12.0);
        let (patch, _) = crop_region(&frame, &b, 1.5, 24).unwrap();

        let (off_y, off_x) = (10usize, 6usize);
        let mut canvas = Tensor::filled(1, 3, 70, 70, 100.0).unwrap();
        for ch in 0..3 {
            for y in 0..40 {
                for x in 0..40 {
                    canvas.set(0, ch, y + off_y, x + off_x, frame.at(0, ch, y, x));
                }
            }
        }
        let shifted = BBox::new(b.x + off_x as f64, b.y + off_y as f64, b.w, b.h);
        let (patch2, _) = crop_region(&canvas, &shifted, 1.5, 24).unwrap();
        assert_eq!(patch.data(), patch2.data());
    }

    #[test]
    fn corner_target_pads_with_channel_means() {
        let frame = gradient_frame(50, 50);
        let b = BBox::new(0.0, 0.0, 10.0, 10.0); // center (5,5), factor 4 -> side 40
        let (patch, geom) = crop_region(&frame, &b, 4.0, 40).unwrap();
        // output pixel (0,0) samples frame at (-14.5, -14.5): all taps outside
        assert_eq!(patch.at(0, 0, 0, 0), geom.pad_value[0]);
        assert_eq!(patch.at(0, 2, 0, 0), geom.pad_value[2]);
        // and the means really are the channel means
        let m = frame.global_avg_pool();
        assert_eq!(geom.pad_value[1], m.at(0, 1, 0, 0));
    }

    #[test]
    fn crop_rejects_bad_inputs() {
        let frame = gradient_frame(20, 20);
        assert!(crop_region(&frame, &BBox::new(5.0, 5.0, 0.0, 2.0), 2.0, 8).is_err());
        assert!(crop_region(&frame, &BBox::new(5.0, 5.0, 2.0, 2.0), 0.0, 8).is_err());
        assert!(crop_region(&frame, &BBox::new(5.0, 5.0, 2.0, 2.0), 2.0, 0).is_err());
        let gray = Tensor::zeros(1, 1, 20, 20).unwrap();
        assert!(crop_region(&gray, &BBox::new(5.0, 5.0, 2.0, 2.0), 2.0, 8).is_err());
    }

    #[test]
    fn identity_crop_maps_boxes_back_unchanged() {
        let geom = CropGeometry {
            center: (32.0, 32.0),
            side: 64.0,
            out_size: 64,
            pad_value: [0.0; 3],
            frame_w: 64,
            frame_h: 64,
        };
        assert_eq!(geom.scale(), 1.0);
        let norm = BBox::new(0.25, 0.5, 0.25, 0.125);
        let mapped = map_box_to_image(&norm, &geom).unwrap();
        assert_eq!(mapped, BBox::new(16.0, 32.0, 16.0, 8.0));
    }

    #[test]
    fn halving_the_scale_doubles_mapped_extents() {
        let base = CropGeometry {
            center: (100.0, 100.0),
            side: 64.0,
            out_size: 64,
            pad_value: [0.0; 3],
            frame_w: 400,
            frame_h: 400,
        };
        let wide = CropGeometry { side: 128.0, ..base.clone() }; // scale 0.5
        let norm = BBox::new(0.4, 0.4, 0.2, 0.1);
        let a = map_box_to_image(&norm, &base).unwrap();
        let b = map_box_to_image(&norm, &wide).unwrap();
        assert_eq!((b.w, b.h), (2.0 * a.w, 2.0 * a.h));
    }

    #[test]
    fn crop_then_map_recovers_the_frame_box() {
        let frame = gradient_frame(120, 160);
        let target = BBox::new(50.0, 40.0, 24.0, 18.0);
        let (_, geom) = crop_region(&frame, &target, 4.0, 64).unwrap();
        // normalized coordinates of the target inside the crop
        let x0 = geom.center.0 - geom.side / 2.0;
        let y0 = geom.center.1 - geom.side / 2.0;
        let norm = BBox::new(
            (target.x - x0) / geom.side,
            (target.y - y0) / geom.side,
            target.w / geom.side,
            target.h / geom.side,
        );
        let back = map_box_to_image(&norm, &geom).unwrap();
        for (got, want) in [(back.x, target.x), (back.y, target.y), (back.w, target.w), (back.h, target.h)] {
            assert!((got - want).abs() <= 1.0, "{got} vs {want}");
        }
    }

    #[test]
    fn mapping_clips_into_the_frame() {
        let geom = CropGeometry {
            center: (5.0, 5.0),
            side: 40.0,
            out_size: 16,
            pad_value: [0.0; 3],
            frame_w: 50,
            frame_h: 30,
        };
        // hangs far off the top-left of the frame
        let clipped = map_box_to_image(&BBox::new(0.0, 0.0, 0.2, 0.9), &geom).unwrap();
        assert!(clipped.x >= 0.0 && clipped.y >= 0.0);
        assert!(clipped.x2() <= 50.0 && clipped.y2() <= 30.0);
        assert!(clipped.w >= 1.0 && clipped.h >= 1.0);

        let bad = CropGeometry { side: 0.0, ..geom };
        assert!(map_box_to_image(&BBox::new(0.1, 0.1, 0.2, 0.2), &bad).is_err());
    }

    #[test]
    fn normalize_applies_channel_statistics() {
        let patch = Tensor::filled(1, 3, 2, 2, 0.5).unwrap();
        let out = normalize(&patch, &[0.5, 0.25, 1.0], &[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), 0.0);
        assert_eq!(out.at(0, 1, 0, 0), 0.5);
        assert_eq!(out.at(0, 2, 0, 0), -2.0);
        assert!(normalize(&patch, &[0.0; 3], &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn hann_window_has_the_documented_shape() {
        let w3 = hann1d(3);
        assert!((w3[0] - 0.5).abs() < 1e-7 && (w3[1] - 1.0).abs() < 1e-7 && (w3[2] - 0.5).abs() < 1e-7);
        assert_eq!(hann1d(1), vec![1.0]);
        let w2 = hann2d(5, 5).unwrap();
        assert_eq!(argmax_cell(&w2).unwrap(), (2, 2));
        assert!(w2.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn penalty_blends_between_response_and_window() {
        let mut resp = Tensor::zeros(1, 1, 5, 5).unwrap();
        resp.set(0, 0, 0, 4, 1.0); // one-hot in a corner
        let win = hann2d(5, 5).unwrap();
        let keep = hanning_penalty(&resp, &win, 0.0).unwrap();
        assert_eq!(keep.data(), resp.data());
        let pure = hanning_penalty(&resp, &win, 1.0).unwrap();
        assert_eq!(argmax_cell(&pure).unwrap(), (2, 2));
        // a confident detection survives the default-strength prior
        let blend = hanning_penalty(&resp, &win, 0.49).unwrap();
        assert_eq!(argmax_cell(&blend).unwrap(), (0, 4));

        let small = hann2d(4, 4).unwrap();
        assert!(hanning_penalty(&resp, &small, 0.5).is_err());
        assert!(hanning_penalty(&resp, &win, 1.5).is_err());
    }

    #[test]
    fn uniform_response_leaves_the_box_at_the_window_center() {
        let hw = 5;
        let out = HeadOutput {
            response: Tensor::zeros(1, 1, hw, hw).unwrap(), // sigmoid -> uniform 0.5
            offset: Tensor::zeros(1, 2, hw, hw).unwrap(),
            size: Tensor::filled(1, 2, hw, hw, -2.0).unwrap(),
        };
        let win = hann2d(hw, hw).unwrap();
        let (norm, _) = decode_windowed(&out, &win, 0.49).unwrap();
        // window peak is the middle cell; zero offsets put the center there
        assert!((norm.cx() - 2.5 / 5.0).abs() < 1e-6);
        assert!((norm.cy() - 2.5 / 5.0).abs() < 1e-6);
    }

    // -- full loop ---------------------------------------------------------

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.template_size = 32;
        cfg.search_size = 64;
        cfg.head.width = 16;
        cfg
    }

    #[test]
    fn init_caches_template_features_and_keeps_the_box() {
        let cfg = small_cfg();
        let model = LightFc::random(&cfg).unwrap();
        let mut rng = Prng::seed_from_u64(11);
        let frame = uniform(&mut rng, 1, 3, 96, 128, 0.0, 1.0);
        let b = BBox::new(50.0, 30.0, 20.0, 16.0);
        let s1 = TrackerState::init(&model, &frame, &b).unwrap();
        assert_eq!(s1.z_feat.shape(), (1, 96, 2, 2));
        assert_eq!(s1.bbox, b);
        assert_eq!(s1.window.shape(), (1, 1, 4, 4));
        let s2 = TrackerState::init(&model, &frame, &b).unwrap();
        assert_eq!(s1.z_feat.data(), s2.z_feat.data());
        assert!(TrackerState::init(&model, &frame, &BBox::new(1.0, 1.0, 0.0, 5.0)).is_err());
    }

    #[test]
    fn hundred_frames_stay_in_bounds_with_template_untouched() {
        let cfg = small_cfg();
        let model = LightFc::random(&cfg).unwrap();
        let mut rng = Prng::seed_from_u64(12);
        let first = uniform(&mut rng, 1, 3, 80, 120, 0.0, 1.0);
        let mut state = TrackerState::init(&model, &first, &BBox::new(55.0, 35.0, 18.0, 14.0)).unwrap();
        let frozen_template = state.z_feat.data().to_vec();
        for _ in 0..100 {
            let frame = uniform(&mut rng, 1, 3, 80, 120, 0.0, 1.0);
            let (b, score) = state.track(&frame).unwrap();
            assert!(b.w >= 1.0 && b.h >= 1.0, "{b:?}");
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= 120.0 && b.y2() <= 80.0, "{b:?}");
            assert!(score.is_finite() && (0.0..=1.0).contains(&(score as f64)));
            assert_eq!(state.bbox, b);
        }
        assert_eq!(state.z_feat.data(), frozen_template.as_slice());
    }

    #[test]
    fn identical_runs_produce_identical_trajectories() {
        let cfg = small_cfg();
        let model = LightFc::random(&cfg).unwrap();
        let mut rng = Prng::seed_from_u64(13);
        let frames: Vec<Tensor> = (0..6).map(|_| uniform(&mut rng, 1, 3, 64, 64, 0.0, 1.0)).collect();
        let init = BBox::new(24.0, 24.0, 16.0, 16.0);
        let run = |m: &LightFc| -> Vec<BBox> {
            let mut st = TrackerState::init(m, &frames[0], &init).unwrap();
            frames[1..].iter().map(|f| st.track(f).unwrap().0).collect()
        };
        let a = run(&model);
        let b = run(&model);
        assert_eq!(a, b);
        let mut wiggle = false;
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
            wiggle |= *x != init;
        }
        assert!(wiggle, "tracker never moved off the init box");
    }
}
