use texid::features::{
    extract_orb, extract_sift, read_feature_set, rescale_keypoints, write_feature_set, FORMAT_VERSION,
};
use texid::geometry::Point;
use texid::imgproc::{edge_map, EdgeMap, GrayImage};
use texid::matching::l2_distance;
use texid::synth::{generate_texture, warp, TextureSpec};
use texid::{Descriptors, ExtractorKind, FeatureSet, Homography, Keypoint};

fn no_edges(img: &GrayImage) -> EdgeMap {
    EdgeMap::empty(img.width(), img.height())
}

fn texture(seed: u64, dims: (u32, u32)) -> GrayImage {
    generate_texture(&TextureSpec {
        dims,
        ..TextureSpec::with_seed(seed)
    })
    .unwrap()
}

fn blob(size: u32, cx: f64, cy: f64, sigma: f64) -> GrayImage {
    GrayImage::from_fn(size, size, |x, y| {
        let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        (30.0 + 200.0 * (-r2 / (2.0 * sigma * sigma)).exp()).round() as u8
    })
}

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ks: f64 = k.iter().sum();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * src[y * w + clamp(x as i64 + i, w)])
                .sum::<f64>()
                / ks;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * tmp[clamp(y as i64 + i, h) * w + x])
                .sum::<f64>()
                / ks;
        }
    }
    out
}

/// Exhaustive scale-space scan without any downsampling: every sample of
/// every DoG layer is compared against its 26 neighbours, and the extremum
/// of largest magnitude is returned as `(x, y, sigma)`.
fn strongest_dog_extremum(img: &GrayImage) -> (f64, f64, f64) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let base: Vec<f64> = img.data().iter().map(|&v| v as f64 / 255.0).collect();
    let sigmas: Vec<f64> = (0..15).map(|k| 1.6 * 2f64.powf(k as f64 / 3.0)).collect();
    let layers: Vec<Vec<f64>> = sigmas
        .iter()
        .map(|&s| gaussian_blur(&base, w, h, (s * s - 0.25).sqrt()))
        .collect();
    let dog: Vec<Vec<f64>> = layers
        .windows(2)
        .map(|p| p[1].iter().zip(&p[0]).map(|(a, b)| a - b).collect())
        .collect();
    let mut best = (0.0, 0.0, 0.0, 0.0f64);
    for l in 1..dog.len() - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = dog[l][y * w + x];
                let mut is_max = true;
                let mut is_min = true;
                for dl in [l - 1, l, l + 1] {
                    for dy in [y - 1, y, y + 1] {
                        for dx in [x - 1, x, x + 1] {
                            if (dl, dy, dx) == (l, y, x) {
                                continue;
                            }
                            let o = dog[dl][dy * w + dx];
                            is_max &= v > o;
                            is_min &= v < o;
                        }
                    }
                }
                if (is_max || is_min) && v.abs() > best.3 {
                    best = (x as f64, y as f64, sigmas[l], v.abs());
                }
            }
        }
    }
    (best.0, best.1, best.2)
}

fn near(a: Point, b: Point, tol: f64) -> bool {
    (a.0 - b.0).abs() <= tol && (a.1 - b.1).abs() <= tol
}

#[test]
fn gaussian_blob_is_found_where_the_exhaustive_scan_puts_it() {
    let img = blob(128, 64.0, 64.0, 4.0);
    let (ox, oy, _) = strongest_dog_extremum(&img);
    assert!(near((ox, oy), (64.0, 64.0), 2.0), "oracle extremum at ({ox}, {oy})");
    let fs = extract_sift(&img, 768, &no_edges(&img)).unwrap();
    assert!(!fs.is_empty());
    assert!(
        fs.keypoints
            .iter()
            .any(|k| near((k.x, k.y), (ox, oy), 2.0) && near((k.x, k.y), (64.0, 64.0), 2.0)),
        "no keypoint near the blob: {:?}",
        fs.keypoints
    );
}

#[test]
fn constant_images_have_no_features() {
    let img = GrayImage::filled(128, 128, 120);
    assert!(extract_sift(&img, 768, &no_edges(&img)).unwrap().is_empty());
    assert!(extract_orb(&img, 768, &no_edges(&img)).unwrap().is_empty());
}

#[test]
fn tiny_images_are_rejected() {
    let img = GrayImage::filled(8, 8, 120);
    assert!(extract_sift(&img, 10, &no_edges(&img)).is_err());
    assert!(extract_orb(&img, 10, &no_edges(&img)).is_err());
    let ok = GrayImage::filled(64, 64, 120);
    assert!(extract_sift(&ok, 0, &no_edges(&ok)).is_err());
}

#[test]
fn sift_is_deterministic_and_well_formed() {
    let img = texture(21, (448, 448));
    let edges = edge_map(&img, 48.0);
    let a = extract_sift(&img, 768, &edges).unwrap();
    let b = extract_sift(&img, 768, &edges).unwrap();
    assert_eq!(write_feature_set(&a), write_feature_set(&b));
    assert!(a.len() <= 768 && a.len() > 500);
    for (i, k) in a.keypoints.iter().enumerate() {
        assert!(k.x >= 0.0 && k.x < 448.0 && k.y >= 0.0 && k.y < 448.0);
        assert!(k.response > 0.0);
        assert!((0.0..std::f64::consts::TAU).contains(&k.orientation));
        assert_eq!(k.edge_dist, edges.dist_at(k.x as f32, k.y as f32));
        let d = a.descriptors.float(i).unwrap();
        let n = d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    for w in a.keypoints.windows(2) {
        assert!(w[0].response >= w[1].response);
    }
}

#[test]
fn capping_keeps_the_strongest_prefix() {
    let img = texture(22, (448, 448));
    let e = no_edges(&img);
    for (kind, big) in [(ExtractorKind::Sift, 4000), (ExtractorKind::Orb, 4000)] {
        let all = texid::features::extract(kind, &img, big, &e).unwrap();
        for cap in [1, 50, 300, 768] {
            let capped = texid::features::extract(kind, &img, cap, &e).unwrap();
            assert_eq!(capped, all.truncated(cap), "{kind:?} cap {cap}");
            if let Some(last) = capped.keypoints.last() {
                assert!(all.keypoints[capped.len()..]
                    .iter()
                    .all(|k| k.response <= last.response));
            }
        }
    }
    let orb = extract_orb(&img, 1600, &e).unwrap();
    assert!(orb.len() <= 1600);
}

#[test]
fn sift_keypoints_follow_an_integer_shift() {
    let big = texture(23, (520, 520));
    let (dx, dy) = (7u32, 3u32);
    let a = big.crop(20, 20, 448, 448).unwrap();
    let b = big.crop(20 + dx, 20 + dy, 448, 448).unwrap();
    let fa = extract_sift(&a, 200, &no_edges(&a)).unwrap();
    let fb = extract_sift(&b, 200, &no_edges(&b)).unwrap();
    let moved = fa
        .keypoints
        .iter()
        .filter(|k| {
            fb.keypoints
                .iter()
                .any(|m| near((k.x - dx as f64, k.y - dy as f64), (m.x, m.y), 1.0))
        })
        .count();
    assert!(moved * 100 >= 80 * fa.len(), "{moved}/{} followed the shift", fa.len());
}

fn rotation_about_centre(deg: f64, size: f64) -> Homography {
    let (s, c) = deg.to_radians().sin_cos();
    let m = size / 2.0 - 0.5;
    Homography::new([[c, -s, m - c * m + s * m], [s, c, m - s * m - c * m], [0.0, 0.0, 1.0]]).unwrap()
}

#[test]
fn sift_descriptors_survive_in_plane_rotation() {
    let img = texture(24, (448, 448));
    let h = rotation_about_centre(30.0, 448.0);
    let rot = warp(&img, &h);
    let fa = extract_sift(&img, 768, &no_edges(&img)).unwrap();
    let fb = extract_sift(&rot, 768, &no_edges(&rot)).unwrap();
    let mut close = 0;
    let mut total = 0;
    for (i, k) in fa.keypoints.iter().enumerate() {
        let p = h.apply((k.x, k.y)).unwrap();
        // stay clear of the black corners introduced by the warp
        if (p.0 - 223.5).powi(2) + (p.1 - 223.5).powi(2) > 180.0f64.powi(2) {
            continue;
        }
        let want_ori = (k.orientation + 30f64.to_radians()).rem_euclid(std::f64::consts::TAU);
        let twin = fb.keypoints.iter().enumerate().find(|(_, m)| {
            let dori = (m.orientation - want_ori).rem_euclid(std::f64::consts::TAU);
            near((m.x, m.y), p, 1.5)
                && (m.scale / k.scale - 1.0).abs() < 0.2
                && dori.min(std::f64::consts::TAU - dori) < 15f64.to_radians()
        });
        if let Some((j, _)) = twin {
            total += 1;
            let d = l2_distance(fa.descriptors.float(i).unwrap(), fb.descriptors.float(j).unwrap());
            if d < 0.6 {
                close += 1;
            }
        }
    }
    assert!(total >= 100, "only {total} ground-truth correspondences");
    assert!(close * 100 >= 70 * total, "{close}/{total} descriptors within 0.6");
}

#[test]
fn orb_keypoints_follow_a_quarter_turn() {
    let img = texture(25, (448, 448));
    let n = 448u32;
    // (x, y) -> (n-1-y, x)
    let rot = GrayImage::from_fn(n, n, |x, y| img.get(y, n - 1 - x));
    let fa = extract_orb(&img, 100, &no_edges(&img)).unwrap();
    let fb = extract_orb(&rot, 100, &no_edges(&rot)).unwrap();
    let hits = fa
        .keypoints
        .iter()
        .filter(|k| {
            let p = ((n - 1) as f64 - k.y, k.x);
            fb.keypoints.iter().any(|m| near((m.x, m.y), p, 2.0))
        })
        .count();
    assert!(hits * 2 >= fa.len(), "{hits}/{} corresponded", fa.len());
}

#[test]
fn rescale_round_trip() {
    let img = texture(26, (448, 448));
    let fs = extract_sift(&img, 100, &no_edges(&img)).unwrap();
    assert_eq!(rescale_keypoints(&fs, (448, 448), (448, 448)), fs);
    let up = rescale_keypoints(&fs, (448, 448), (672, 672));
    for (a, b) in fs.keypoints.iter().zip(&up.keypoints) {
        assert!((b.x - 1.5 * a.x).abs() < 1e-9);
    }
    let back = rescale_keypoints(&up, (672, 672), (448, 448));
    for (a, b) in fs.keypoints.iter().zip(&back.keypoints) {
        assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9 && (a.scale - b.scale).abs() < 1e-9);
    }
    assert_eq!(back.descriptors, fs.descriptors);
}

fn golden_float_set() -> FeatureSet {
    FeatureSet {
        keypoints: vec![
            Keypoint {
                x: 10.5,
                y: 20.25,
                scale: 1.6,
                orientation: 0.5,
                response: 0.125,
                edge_dist: 7,
            },
            Keypoint {
                x: 447.0,
                y: 0.0,
                scale: 3.2,
                orientation: 6.0,
                response: 0.0625,
                edge_dist: 255,
            },
        ]
        .into_iter()
        .map(|k| Keypoint {
            scale: k.scale as f32 as f64,
            ..k
        })
        .collect(),
        descriptors: Descriptors::Float128((0..256).map(|i| i as f32 / 256.0).collect()),
        source_dims: (448, 448),
        extractor: ExtractorKind::Sift,
        version: FORMAT_VERSION,
    }
}

fn golden_binary_set() -> FeatureSet {
    FeatureSet {
        keypoints: vec![Keypoint {
            x: 3.0,
            y: 4.0,
            scale: 3.0,
            orientation: 1.0,
            response: 99.5,
            edge_dist: 0,
        }],
        descriptors: Descriptors::Binary256(vec![[0x0123_4567_89ab_cdef, 0, u64::MAX, 1]]),
        source_dims: (640, 480),
        extractor: ExtractorKind::Orb,
        version: FORMAT_VERSION,
    }
}

/// The byte layout written out field by field.
fn hand_encoded(fs: &FeatureSet) -> Vec<u8> {
    let mut b = b"TIFX".to_vec();
    b.extend(1u16.to_le_bytes());
    b.push(match fs.extractor {
        ExtractorKind::Sift => 0,
        ExtractorKind::Orb => 1,
    });
    b.push(match fs.descriptors {
        Descriptors::Float128(_) => 0,
        Descriptors::Binary256(_) => 1,
    });
    b.extend((fs.keypoints.len() as u32).to_le_bytes());
    b.extend((fs.source_dims.0 as u16).to_le_bytes());
    b.extend((fs.source_dims.1 as u16).to_le_bytes());
    for k in &fs.keypoints {
        for v in [k.x, k.y, k.scale, k.orientation, k.response] {
            b.extend((v as f32).to_le_bytes());
        }
        b.push(k.edge_dist);
    }
    match &fs.descriptors {
        Descriptors::Float128(v) => v.iter().for_each(|x| b.extend(x.to_le_bytes())),
        Descriptors::Binary256(v) => v.iter().flatten().for_each(|x| b.extend(x.to_le_bytes())),
    }
    b
}

#[test]
fn tifx_golden_files() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for (name, fs) in [
        ("sift_2kp.tifx", golden_float_set()),
        ("orb_1kp.tifx", golden_binary_set()),
    ] {
        let golden = std::fs::read(dir.join(name)).unwrap();
        assert_eq!(write_feature_set(&fs), golden, "{name}");
        assert_eq!(hand_encoded(&fs), golden, "{name}");
        assert_eq!(read_feature_set(&golden).unwrap(), fs);
    }
}

#[test]
fn tifx_rejects_damage() {
    let bytes = write_feature_set(&golden_float_set());
    for cut in [0, 3, 10, 16, 30, bytes.len() - 1] {
        assert!(read_feature_set(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_feature_set(&bad).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(read_feature_set(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(read_feature_set(&long).is_err());
}
