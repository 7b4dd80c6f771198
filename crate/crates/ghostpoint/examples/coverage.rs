//! TEMPORARY rig-tuning harness: renders many scenes under the default
//! environment and reports object pixel coverage, frame clipping, and
//! feature-token geometry. Delete before release.

use ghostpoint::geom::Vec3;
use ghostpoint::scene::{lift_tokens, COARSE_STRIDE, FINE_STRIDE};
use ghostpoint::synth::{gen_scene, render, EnvConfig, Shape, TaskId, PALETTE};
use ghostpoint::Real;

fn main() {
    let cfg = EnvConfig::default();
    let n_seeds = 500;

    let mut min_target_px = usize::MAX;
    let mut sum_target_px = 0usize;
    let mut views_counted = 0usize;
    let mut clipped_scenes = 0usize;
    let mut zero_px_views = 0usize;
    let mut fine_on_target_min = usize::MAX;
    let mut fine_on_target_sum = 0usize;
    let mut coarse_kept_sum = 0usize;
    let mut fine_kept_sum = 0usize;
    let mut lifts = 0usize;

    for seed in 0..n_seeds {
        let spec = gen_scene::<Real>(seed, TaskId::ReachAbove, &cfg).unwrap();
        let obs = render(&spec, &cfg).unwrap();
        let mut scene_clipped = false;

        for view in &obs {
            // Clipping: project each object's 8 extreme surface points.
            for obj in &spec.objects {
                let (c, r) = match obj.shape {
                    Shape::Sphere { center, radius } => (center, radius),
                    Shape::Cube { aabb } => {
                        let half = (aabb.max - aabb.min) * 0.5;
                        (aabb.min + half, half.x.max(half.y).max(half.z))
                    }
                };
                for (dx, dy, dz) in [
                    (r, 0.0, 0.0),
                    (-r, 0.0, 0.0),
                    (0.0, r, 0.0),
                    (0.0, -r, 0.0),
                    (0.0, 0.0, r),
                    (0.0, 0.0, -r),
                ] {
                    let p = Vec3::new(c.x + dx, c.y + dy, c.z + dz);
                    let (u, v, z) = view.camera.project(p);
                    if z <= 0.0
                        || u < 0.0
                        || v < 0.0
                        || u >= cfg.image_size as f64
                        || v >= cfg.image_size as f64
                    {
                        scene_clipped = true;
                    }
                }
            }

            // Pixel coverage of the target (object 0): count pixels whose
            // color channel matches the target palette entry closely.
            let target_rgb = PALETTE[spec.objects[0].color].1;
            let mut px = 0usize;
            for i in 0..cfg.image_size * cfg.image_size {
                let rgb = &view.rgb[i * 3..i * 3 + 3];
                // Lambert shading scales all channels equally, so compare hue.
                let mag = rgb[0] + rgb[1] + rgb[2];
                let tmag = target_rgb[0] + target_rgb[1] + target_rgb[2];
                if mag > 1e-6 {
                    let d = (rgb[0] / mag - target_rgb[0] / tmag).abs()
                        + (rgb[1] / mag - target_rgb[1] / tmag).abs()
                        + (rgb[2] / mag - target_rgb[2] / tmag).abs();
                    if d < 0.05 {
                        px += 1;
                    }
                }
            }
            min_target_px = min_target_px.min(px);
            sum_target_px += px;
            views_counted += 1;
            if px == 0 {
                zero_px_views += 1;
            }

            // Token lifting stats.
            let coarse = lift_tokens(view, COARSE_STRIDE, &spec.workspace).unwrap();
            let fine = lift_tokens(view, FINE_STRIDE, &spec.workspace).unwrap();
            coarse_kept_sum += coarse.kept.len();
            fine_kept_sum += fine.kept.len();
            lifts += 1;

            // Fine tokens within radius + one stride footprint of the target center.
            let (tc, tr) = match spec.objects[0].shape {
                Shape::Sphere { center, radius } => (center, radius),
                Shape::Cube { aabb } => {
                    let half = (aabb.max - aabb.min) * 0.5;
                    (aabb.min + half, half.x)
                }
            };
            let near = fine
                .positions
                .iter()
                .filter(|p| p.dist(tc) < tr + 0.02)
                .count();
            fine_on_target_min = fine_on_target_min.min(near);
            fine_on_target_sum += near;
        }
        if scene_clipped {
            clipped_scenes += 1;
        }
    }

    println!("scenes {n_seeds}  views/scene {}", cfg.views);
    println!("clipped scenes        {clipped_scenes}");
    println!(
        "target px/view        min {min_target_px}  mean {:.1}  zero-px views {zero_px_views}",
        sum_target_px as f64 / views_counted as f64
    );
    println!(
        "fine tokens near tgt  min {fine_on_target_min}  mean {:.1}",
        fine_on_target_sum as f64 / views_counted as f64
    );
    println!(
        "kept tokens/view      coarse {:.1}/64  fine {:.1}/256",
        coarse_kept_sum as f64 / lifts as f64,
        fine_kept_sum as f64 / lifts as f64
    );
}
