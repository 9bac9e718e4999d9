// Renderer acceptance checks shared by the acceptance suite: analytic
// compositing, a fully scalar two-splat oracle, permutation invariance,
// and the all-attribute finite-difference gradient check.

use rigsplat_core::geometry::{CameraModel, RigidTransform};
use rigsplat_core::img::Image;
use rigsplat_core::primitives::{sh_basis_count, GaussianCloud, SourceTag};
use rigsplat_core::renderer::{render, render_backward, RenderOptions, COV_DILATION};
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const SH_C0: f64 = 0.28209479177387814;

fn centered_cam(w: usize, h: usize, f: f64) -> CameraModel<f64> {
    CameraModel::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
}

pub fn random_cloud(rng: &mut StdRng, count: usize, sh_degree: usize) -> GaussianCloud<f64> {
    let basis = sh_basis_count(sh_degree);
    let mut cloud = GaussianCloud::empty(sh_degree);
    for m in 0..count {
        cloud.positions.push(Vector3::new(
            rng.gen_range(-1.2..1.2),
            rng.gen_range(-0.9..0.9),
            rng.gen_range(3.0..8.0),
        ));
        cloud.scales.push(Vector3::new(
            rng.gen_range(0.05..0.35),
            rng.gen_range(0.05..0.35),
            rng.gen_range(0.05..0.35),
        ));
        let q = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt().max(0.1);
        cloud.rotations.push([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
        cloud.opacities.push(rng.gen_range(0.2..0.9));
        for _ in 0..3 * basis {
            cloud.sh.push(rng.gen_range(-0.3..0.3));
        }
        cloud.tags.push(SourceTag { camera: 0, timestep: m as i64 });
    }
    cloud
}

pub fn single_splat_analytic(tol: f64) {
    let cam = centered_cam(33, 33, 60.0);
    let alpha = 0.63;
    let bg = [0.1, 0.2, 0.3];
    let dc = 0.27;
    let mut cloud = GaussianCloud::<f64>::empty(0);
    cloud.positions.push(Vector3::new(0.0, 0.0, 5.0));
    cloud.scales.push(Vector3::new(20.0, 20.0, 20.0));
    cloud.rotations.push([1.0, 0.0, 0.0, 0.0]);
    cloud.opacities.push(alpha);
    cloud.sh.extend_from_slice(&[dc, dc, dc]);
    cloud.tags.push(SourceTag { camera: 0, timestep: 0 });
    let opts = RenderOptions { background: bg, ..Default::default() };
    let out = render(&cloud, &cam, &RigidTransform::identity(), &opts).unwrap();
    let color = 0.5 + dc * SH_C0;
    for c in 0..3 {
        let expect = color * alpha + bg[c] * (1.0 - alpha);
        let got = out.image.at(16, 16, c);
        assert!((got - expect).abs() < tol, "channel {c}: {got} vs {expect}");
    }
}

pub fn two_splat_scalar_oracle(tol: f64) {
    let cam = centered_cam(24, 18, 60.0);
    let bg = [0.05, 0.1, 0.15];
    let params = [
        ([0.2, -0.1, 4.0], 0.25, 0.7, [0.1, -0.05, 0.2]),
        ([0.35, 0.05, 6.0], 0.4, 0.55, [-0.15, 0.12, 0.02]),
    ];
    let mut cloud = GaussianCloud::<f64>::empty(0);
    for (p, s, a, c) in params {
        cloud.positions.push(Vector3::new(p[0], p[1], p[2]));
        cloud.scales.push(Vector3::new(s, s, s));
        cloud.rotations.push([1.0, 0.0, 0.0, 0.0]);
        cloud.opacities.push(a);
        cloud.sh.extend_from_slice(&c);
        cloud.tags.push(SourceTag { camera: 0, timestep: 0 });
    }
    let opts = RenderOptions { background: bg, exact: true, ..Default::default() };
    let out = render(&cloud, &cam, &RigidTransform::identity(), &opts).unwrap();

    let splat = |p: [f64; 3], s: f64| -> ([f64; 2], [f64; 3]) {
        let (x, y, z) = (p[0], p[1], p[2]);
        let f = cam.fx;
        let mean = [f * x / z + cam.cx, f * y / z + cam.cy];
        let j = [[f / z, 0.0, -f * x / (z * z)], [0.0, f / z, -f * y / (z * z)]];
        let mut cov = [0.0f64; 3];
        cov[0] = s * s * (j[0][0] * j[0][0] + j[0][2] * j[0][2]) + COV_DILATION;
        cov[1] = s * s * (j[0][2] * j[1][2]);
        cov[2] = s * s * (j[1][1] * j[1][1] + j[1][2] * j[1][2]) + COV_DILATION;
        (mean, cov)
    };
    let alpha_at = |mean: [f64; 2], cov: [f64; 3], opacity: f64, px: f64, py: f64| -> f64 {
        let det = cov[0] * cov[2] - cov[1] * cov[1];
        let inv = [cov[2] / det, -cov[1] / det, cov[0] / det];
        let dx = px - mean[0];
        let dy = py - mean[1];
        let power = -0.5 * (inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[2] * dy * dy);
        (opacity * power.exp()).min(0.99)
    };
    let (m1, c1) = splat(params[0].0, params[0].1);
    let (m2, c2) = splat(params[1].0, params[1].1);
    let col = |dc: [f64; 3]| -> Vec<f64> { dc.iter().map(|v| 0.5 + v * SH_C0).collect() };
    let (col1, col2) = (col(params[0].3), col(params[1].3));
    for y in 0..18 {
        for x in 0..24 {
            let a1 = alpha_at(m1, c1, params[0].2, x as f64, y as f64);
            let a2 = alpha_at(m2, c2, params[1].2, x as f64, y as f64);
            for c in 0..3 {
                let expect = (col1[c] * a1 + col2[c] * a2 * (1.0 - a1)
                    + bg[c] * (1.0 - a1) * (1.0 - a2))
                    .clamp(0.0, 1.0);
                let got = out.image.at(y, x, c);
                assert!((got - expect).abs() < tol, "pixel ({y},{x}) ch {c}: {got} vs {expect}");
            }
        }
    }
}

pub fn permutation_invariance(tol: f64) {
    let mut rng = StdRng::seed_from_u64(31);
    let cloud = random_cloud(&mut rng, 50, 1);
    let cam = centered_cam(32, 24, 60.0);
    let opts = RenderOptions::default();
    let base = render(&cloud, &cam, &RigidTransform::identity(), &opts).unwrap();
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.shuffle(&mut rng);
    let basis = cloud.sh_basis();
    let mut shuffled = GaussianCloud::empty(cloud.sh_degree);
    for &m in &order {
        shuffled.positions.push(cloud.positions[m]);
        shuffled.scales.push(cloud.scales[m]);
        shuffled.rotations.push(cloud.rotations[m]);
        shuffled.opacities.push(cloud.opacities[m]);
        shuffled
            .sh
            .extend_from_slice(&cloud.sh[m * 3 * basis..(m + 1) * 3 * basis]);
        shuffled.tags.push(cloud.tags[m]);
    }
    let out = render(&shuffled, &cam, &RigidTransform::identity(), &opts).unwrap();
    let diff = out.image.max_abs_diff(&base.image);
    assert!(diff < tol, "permutation changed the render by {diff}");
}

/// Central finite differences over every attribute of an 8-Gaussian cloud
/// rendered at 32x32 in f64. Probes every parameter of every class.
pub fn full_gradient_check(rng: &mut StdRng) -> (f64, usize) {
    let cloud = random_cloud(rng, 8, 1);
    let cam = centered_cam(32, 32, 60.0);
    let pose = RigidTransform::from_axis_angle(
        Vector3::new(0.02, -0.03, 0.01),
        Vector3::new(0.1, -0.05, 0.2),
    );
    let opts = RenderOptions { background: [0.15, 0.25, 0.35], exact: true, ..Default::default() };
    let weights: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |c: &GaussianCloud<f64>| -> f64 {
        let out = render(c, &cam, &pose, &opts).unwrap();
        out.image.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let d_image = Image { height: 32, width: 32, channels: 3, data: weights.clone() };
    let grads = render_backward(&cloud, &cam, &pose, &opts, &d_image).unwrap();
    let step = 1e-5;
    let basis = cloud.sh_basis();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for m in 0..cloud.len() {
        let mut probe = |analytic: f64, apply: &dyn Fn(&mut GaussianCloud<f64>, f64)| {
            let fd = {
                let mut plus = cloud.clone();
                apply(&mut plus, step);
                let mut minus = cloud.clone();
                apply(&mut minus, -step);
                (loss(&plus) - loss(&minus)) / (2.0 * step)
            };
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        };
        for i in 0..3 {
            probe(grads.positions[m][i], &|c, d| c.positions[m][i] += d);
            probe(grads.scales[m][i], &|c, d| c.scales[m][i] += d);
        }
        for i in 0..4 {
            probe(grads.rotations[m][i], &|c, d| c.rotations[m][i] += d);
        }
        probe(grads.opacities[m], &|c, d| c.opacities[m] += d);
        for i in 0..3 * basis {
            probe(grads.sh[m * 3 * basis + i], &|c, d| c.sh[m * 3 * basis + i] += d);
        }
    }
    (max_rel, checked)
}
