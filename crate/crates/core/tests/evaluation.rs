use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripeclean_core::degrade::{smooth_texture, synth_stripe, NoiseKind, StripeSpec};
use stripeclean_core::evaluation::{
    column_means, compare_dirs, infer_padded, psnr, roughness, ssim, ImageMetrics, MetricsReport,
    PSNR_CAP,
};
use stripeclean_core::gray::{write_png16, ImageGray};
use stripeclean_core::model::{Model, ModelConfig};
use stripeclean_core::Error;

fn random_image(h: usize, w: usize, seed: u64) -> ImageGray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageGray::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
}

fn psnr_oracle(a: &ImageGray, b: &ImageGray) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let d = a.get(y, x) as f64 - b.get(y, x) as f64;
            s += d * d;
        }
    }
    10.0 * (1.0 / (s / (a.height() * a.width()) as f64)).log10()
}

/// Direct 11x11 windowed statistics with an explicitly built 2-D kernel.
fn ssim_oracle(a: &ImageGray, b: &ImageGray) -> f64 {
    let mut k = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (u, row) in k.iter_mut().enumerate() {
        for (v, w) in row.iter_mut().enumerate() {
            let r2 = (u as f64 - 5.0).powi(2) + (v as f64 - 5.0).powi(2);
            *w = (-r2 / 4.5).exp();
            total += *w;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..=a.height() - 11 {
        for j in 0..=a.width() - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let w = k[u][v] / total;
                    ma += w * a.get(i + u, j + v) as f64;
                    mb += w * b.get(i + u, j + v) as f64;
                }
            }
            let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let w = k[u][v] / total;
                    let (da, db) = (
                        a.get(i + u, j + v) as f64 - ma,
                        b.get(i + u, j + v) as f64 - mb,
                    );
                    va += w * da * da;
                    vb += w * db * db;
                    cv += w * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cv + c2)
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn roughness_oracle(a: &ImageGray) -> f64 {
    let (h, w) = (a.height(), a.width());
    let dx: f64 = (0..h)
        .flat_map(|y| (0..w - 1).map(move |x| (y, x)))
        .map(|(y, x)| (a.get(y, x + 1) as f64 - a.get(y, x) as f64).abs())
        .sum();
    let dy: f64 = (0..h - 1)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| (a.get(y + 1, x) as f64 - a.get(y, x) as f64).abs())
        .sum();
    let n: f64 = a.pixels().iter().map(|v| v.abs() as f64).sum();
    (dx + dy) / n
}

#[test]
fn constant_gap_gives_twenty_db() {
    let a = ImageGray::filled(16, 16, 0.25);
    let b = ImageGray::filled(16, 16, 0.35);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 20.0).abs() < 1e-5, "{p}");
    // exact in binary: a gap of 0.125 gives 10 log10(64)
    let c = ImageGray::filled(16, 16, 0.375);
    assert_eq!(psnr(&a, &c).unwrap(), 10.0 * 64f64.log10());
}

#[test]
fn identical_images_hit_the_cap() {
    let a = random_image(20, 20, 1);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn metrics_match_loop_oracles() {
    for s in 0..20 {
        let a = random_image(24, 30, 2 * s);
        let b = random_image(24, 30, 2 * s + 1);
        assert!((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
        assert!((roughness(&a) - roughness_oracle(&a)).abs() < 1e-6);
    }
}

#[test]
fn anticorrelated_checker_has_negative_ssim() {
    let a = ImageGray::from_fn(16, 16, |y, x| ((y + x) % 2) as f32);
    let b = a.map(|v| 1.0 - v);
    assert!(ssim(&a, &b).unwrap() < 0.0);
}

#[test]
fn ssim_needs_a_full_window() {
    let a = random_image(10, 40, 3);
    match ssim(&a, &a) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "height"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        psnr(&a, &random_image(10, 41, 3)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn roughness_cases() {
    assert_eq!(roughness(&ImageGray::filled(8, 8, 0.4)), 0.0);
    assert_eq!(roughness(&ImageGray::filled(8, 8, 0.0)), 0.0);
    // one brighter column in a flat image: two jumps of 0.1 on each of 8 rows
    let a = ImageGray::from_fn(8, 8, |_, x| if x == 3 { 0.6 } else { 0.5 });
    let want = (8.0 * 2.0 * 0.1) / (56.0 * 0.5 + 8.0 * 0.6);
    assert!((roughness(&a) - want).abs() < 1e-6);
    // rows identical: only horizontal differences count
    let s = random_image(1, 12, 4);
    let stripes = ImageGray::from_fn(6, 12, |_, x| s.get(0, x));
    let horiz: f64 = (0..11)
        .map(|x| (s.get(0, x + 1) - s.get(0, x)).abs() as f64)
        .sum::<f64>()
        * 6.0;
    let norm: f64 = stripes.pixels().iter().map(|&v| v as f64).sum();
    assert!((roughness(&stripes) - horiz / norm).abs() < 1e-9);
}

#[test]
fn column_means_recover_stripe_profile() {
    let s = random_image(1, 16, 5);
    let im = ImageGray::from_fn(7, 16, |_, x| s.get(0, x));
    for (x, m) in column_means(&im).into_iter().enumerate() {
        assert!((m - s.get(0, x) as f64).abs() < 1e-12);
    }
    assert!(column_means(&ImageGray::filled(5, 4, 0.3))
        .iter()
        .all(|&m| (m - 0.3f32 as f64).abs() < 1e-12));
    let r = random_image(9, 11, 6);
    for (x, m) in column_means(&r).into_iter().enumerate() {
        let o: f64 = (0..9).map(|y| r.get(y, x) as f64).sum::<f64>() / 9.0;
        assert!((m - o).abs() < 1e-12);
    }
}

#[test]
fn destriping_direction_on_smooth_textures() {
    for s in 0..20 {
        let clean = smooth_texture(64, s);
        let (deg, _) = synth_stripe(
            &clean,
            &StripeSpec::new(NoiseKind::Gaussian { sigma: 0.03 }, s),
        )
        .unwrap();
        assert!(roughness(&clean) <= roughness(&deg), "texture {s}");
    }
}

/// Mirror index without edge repetition, written independently of the library.
fn mirror(i: usize, n: usize) -> usize {
    let mut i = i as i64;
    let n = n as i64;
    while i >= n || i < 0 {
        i = if i >= n { 2 * (n - 1) - i } else { -i };
    }
    i as usize
}

#[test]
fn padded_inference_matches_manual_pad_and_crop() {
    let m = Model::<f32>::build(&ModelConfig::toy(), 7).unwrap();
    let img = random_image(60, 70, 8);
    let out = infer_padded(&m, &img).unwrap();
    assert_eq!((out.height(), out.width()), (60, 70));
    let k = m.config().required_multiple();
    let (ph, pw) = (60usize.div_ceil(k) * k, 70usize.div_ceil(k) * k);
    let padded = ImageGray::from_fn(ph, pw, |y, x| img.get(mirror(y, 60), mirror(x, 70)));
    let full = ImageGray::from_tensor(&m.predict(&padded.to_tensor()).unwrap(), 0).unwrap();
    let manual = full.crop(0, 0, 60, 70).unwrap().clamped();
    let diff = out
        .pixels()
        .iter()
        .zip(manual.pixels())
        .fold(0.0f32, |a, (p, q)| a.max((p - q).abs()));
    assert!(diff <= 1e-4, "{diff}");
}

#[test]
fn padded_inference_without_padding_equals_forward() {
    let m = Model::<f32>::build(&ModelConfig::toy(), 9).unwrap();
    let img = random_image(64, 64, 10);
    let direct = ImageGray::from_tensor(&m.predict(&img.to_tensor()).unwrap(), 0)
        .unwrap()
        .clamped();
    assert_eq!(infer_padded(&m, &img).unwrap(), direct);
    assert!(matches!(
        infer_padded(&m, &random_image(6, 64, 1)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn report_csv_and_directory_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = (dir.path().join("pred"), dir.path().join("ref"));
    std::fs::create_dir_all(&p).unwrap();
    std::fs::create_dir_all(&r).unwrap();
    for i in 0..3 {
        let im = smooth_texture(32, i);
        write_png16(&p.join(format!("im{i}.png")), &im).unwrap();
        write_png16(&r.join(format!("im{i}.png")), &im).unwrap();
    }
    let rep = compare_dirs(&p, &r).unwrap();
    assert_eq!(rep.rows.len(), 3);
    assert!(rep.rows.iter().all(|m| m.psnr == PSNR_CAP && m.ssim == 1.0));
    let csv = rep.to_csv();
    assert!(csv.starts_with("image,psnr,ssim,rho\nim0.png,99.000000,1.00000000,"));

    write_png16(&p.join("im1.png"), &smooth_texture(40, 1)).unwrap();
    match compare_dirs(&p, &r) {
        Err(Error::Dimension { detail, .. }) => assert!(detail.contains("im1.png"), "{detail}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn report_aggregates() {
    let a = random_image(16, 16, 11);
    let rows = (0..4)
        .map(|i| {
            ImageMetrics::compute(
                format!("{i}"),
                &a.map(|v| (v + 0.01 * i as f32).min(1.0)),
                &a,
            )
            .unwrap()
        })
        .collect();
    let rep = MetricsReport { rows };
    let (m, s) = rep.psnr();
    let vals: Vec<f64> = rep.rows.iter().map(|r| r.psnr).collect();
    assert!((m - vals.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    assert!(s > 0.0);
    assert!(rep.summary().contains("images: 4"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn psnr_and_ssim_are_symmetric(s in any::<u64>()) {
        let a = random_image(14, 15, s);
        let b = random_image(14, 15, s ^ 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(roughness(&a) >= 0.0);
    }
}
