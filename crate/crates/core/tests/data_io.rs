use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spn::data::{
    bucket_of, composite, decode_mask_png, decode_png, encode_mask_png, encode_png, load_image, load_mask,
    make_synthetic_pair, mask_ratio, resize_mask, Dataset, ImageTensor, MaskTensor,
};

/// Test pattern shared with the reference values below: horizontal and vertical
/// ramps in R and G, a busy B channel.
fn pattern(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let b = if (x + y) % 7 != 0 { ((x * 3 + y * 5) % 256) as u8 } else { 40 };
        Rgb([(x * 255 / (w - 1)) as u8, (y * 255 / (h - 1)) as u8, b])
    })
}

/// 8-bit values of a bilinear resize of the central 200×200 square of
/// `pattern(300, 200)` to 256×256, produced by PIL's `Image.resize`.
const REFERENCE: [((usize, usize), [u8; 3]); 4] =
    [((0, 0), [42, 0, 150]), ((0, 255), [212, 0, 235]), ((255, 0), [42, 255, 121]), ((255, 255), [212, 255, 40])];

#[test]
fn center_crop_resize_matches_reference_corners() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.png");
    pattern(300, 200).save(&path).unwrap();
    let img = load_image(&path, 256, true, 3).unwrap();
    assert_eq!(img.shape(), (3, 256, 256));
    for ((y, x), want) in REFERENCE {
        for c in 0..3 {
            let got = (f64::from(img.at(c, y, x)) + 1.0) * 127.5;
            assert!((got - f64::from(want[c])).abs() <= 1.0 + 1e-9, "({y},{x}) c{c}: {got} vs {}", want[c]);
        }
    }
}

#[test]
fn pixel_values_map_to_signed_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("px.png");
    RgbImage::from_fn(4, 4, |x, _| Rgb([0, 255, (x * 60) as u8])).save(&path).unwrap();
    let img = load_image(&path, 4, false, 3).unwrap();
    assert_eq!(img.at(0, 0, 0), -1.0);
    assert_eq!(img.at(1, 2, 3), 1.0);
    assert!((img.at(2, 0, 1) - (60.0 / 127.5 - 1.0)).abs() < 1e-6);
}

#[test]
fn sizes_must_be_divisible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("px.png");
    pattern(8, 8).save(&path).unwrap();
    assert!(load_image(&path, 30, false, 3).is_err());
    assert!(load_image(&path, 32, false, 3).is_ok());
}

#[test]
fn mask_threshold_is_128() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    image::GrayImage::from_fn(4, 1, |x, _| image::Luma([[0, 127, 128, 255][x as usize]])).save(&path).unwrap();
    let m = load_mask(&path, 4, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(&m.data()[..4], &[0, 0, 1, 1]);
}

#[test]
fn corrupt_files_are_decode_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.png");
    std::fs::write(&path, b"not a png").unwrap();
    assert!(matches!(load_image(&path, 32, false, 3), Err(spn::SpnError::Decode { .. })));
    assert!(decode_png(b"junk").is_err());
}

#[test]
fn png_round_trips_are_exact() {
    let p = make_synthetic_pair(3, 32).unwrap();
    let img = decode_png(&encode_png(&p.image).unwrap()).unwrap();
    assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
    assert_eq!(decode_mask_png(&encode_mask_png(&p.mask).unwrap()).unwrap(), p.mask);
}

#[test]
fn synthetic_pairs_are_seeded_and_within_protocol() {
    for seed in 0..50 {
        let a = make_synthetic_pair(seed, 64).unwrap();
        let b = make_synthetic_pair(seed, 64).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        let r = mask_ratio(&a.mask);
        assert!(r > 0.05 && r <= 0.6, "seed {seed}: ratio {r}");
        assert!(bucket_of(&a.mask).is_ok());
    }
    assert_ne!(make_synthetic_pair(1, 64).unwrap().image, make_synthetic_pair(2, 64).unwrap().image);
}

#[test]
fn composite_keeps_valid_pixels_exactly() {
    let p = make_synthetic_pair(8, 32).unwrap();
    let fill = ImageTensor::filled(3, 32, 32, 0.25);
    let out = composite(&fill, &p.image, &p.mask).unwrap();
    let plane = 32 * 32;
    for i in 0..3 * plane {
        let want = if p.mask.data()[i % plane] == 1 { 0.25 } else { p.image.data()[i] };
        assert_eq!(out.data()[i], want);
    }
    assert!(composite(&fill, &p.image, &MaskTensor::zeros(16, 16)).is_err());
}

#[test]
fn mask_pyramid_levels_are_binary_and_dyadic() {
    let p = make_synthetic_pair(9, 64).unwrap();
    for level in 1..=3 {
        let m = resize_mask(&p.mask, level).unwrap();
        assert_eq!(m.shape(), (64 >> (level - 1), 64 >> (level - 1)));
        assert!(m.data().iter().all(|&v| v <= 1));
    }
}

#[test]
fn file_dataset_pairs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let masks = dir.path().join("masks");
    std::fs::create_dir(&masks).unwrap();
    let mut manifest = String::new();
    for i in 0..4 {
        let p = make_synthetic_pair(i, 32).unwrap();
        let name = format!("img{i}.png");
        spn::data::save_image(&dir.path().join(&name), &p.image).unwrap();
        spn::data::save_mask(&masks.join(format!("m{i}.png")), &p.mask).unwrap();
        manifest.push_str(&name);
        manifest.push('\n');
    }
    std::fs::write(dir.path().join("list.txt"), manifest).unwrap();
    let ds = Dataset::from_files(&dir.path().join("list.txt"), &masks, 32, false, true).unwrap();
    assert_eq!(ds.len(), 4);
    let a = ds.evaluation_pairs(5, 3).unwrap();
    let b = ds.evaluation_pairs(5, 3).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.mask == y.mask));
    assert!(Dataset::from_files(&dir.path().join("missing.txt"), &masks, 32, false, true).is_err());
}
