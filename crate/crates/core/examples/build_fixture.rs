//! Writes the `shapes` fixture bundle used by the test suites.
//!
//! The network is constructed by hand rather than trained: a 1x1 conv turns
//! each color channel into "above mean" and "below mean" detectors, a 3x3
//! conv combines them into eight color detectors (red, green, blue, yellow,
//! cyan, magenta, white, black), a max-pool and a second 3x3 conv spread and
//! mix the evidence, and a linear head averages each detector over space.
//! The dataset is one solid rectangle or ellipse per image on a noise
//! background centered on the normalization mean, with the object's tight
//! bounding box as annotation.
//!
//! Usage: `cargo run --release --example build_fixture [-- <out_dir>]`

use std::fs;
use std::path::{Path, PathBuf};

use camforge::model::{LayerKind, LayerSpec, Manifest, Model, Preprocessing};
use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SIZE: usize = 48;
const CLASSES: [(&str, [u8; 3]); 8] = [
    ("red", [1, 0, 0]),
    ("green", [0, 1, 0]),
    ("blue", [0, 0, 1]),
    ("yellow", [1, 1, 0]),
    ("cyan", [0, 1, 1]),
    ("magenta", [1, 0, 1]),
    ("white", [1, 1, 1]),
    ("black", [0, 0, 0]),
];
const IMAGES_PER_CLASS: usize = 4;

fn conv(name: &str, cin: usize, cout: usize, k: usize, pad: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            stride: 1,
            padding: pad,
        },
    )
}

fn build_model() -> Model {
    let prep = Preprocessing::imagenet();
    let k = CLASSES.len();
    let pooled = SIZE / 2;
    let manifest = Manifest {
        format_version: 1,
        input_shape: [1, 3, SIZE, SIZE],
        class_count: k,
        preprocessing: prep.clone(),
        upsampling: "bilinear_half_pixel".into(),
        layers: vec![
            conv("conv1", 3, 6, 1, 0),
            LayerSpec::new("relu1", LayerKind::Relu),
            conv("conv2", 6, k, 3, 1),
            LayerSpec::new("relu2", LayerKind::Relu),
            LayerSpec::new(
                "pool",
                LayerKind::Maxpool2d {
                    kernel_size: 2,
                    stride: 2,
                },
            ),
            conv("conv3", k, k, 3, 1),
            LayerSpec::new("relu3", LayerKind::Relu),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new(
                "fc",
                LayerKind::Linear {
                    in_features: k * pooled * pooled,
                    out_features: k,
                },
            ),
        ],
    };

    let mut p = Vec::new();
    // conv1: with raw = std * x + mean, high_c = 4 (raw - mean_c) = 4 std_c x
    // and low_c = -high_c; zero at the normalization mean, so masking an
    // object towards the baseline weakens its detectors proportionally
    for unit in 0..6 {
        let c = unit % 3;
        let sign = if unit < 3 { 1.0 } else { -1.0 };
        for ic in 0..3 {
            p.push(if ic == c { sign * 4.0 * prep.std[c] } else { 0.0 });
        }
    }
    p.extend(std::iter::repeat_n(0.0, 6));
    // conv2: 3x3 box over the matching detectors minus 3x the mismatching
    // ones, minus 1
    for (_, bits) in CLASSES {
        for unit in 0..6 {
            let c = unit % 3;
            let wanted = (unit < 3) == (bits[c] == 1);
            p.extend(std::iter::repeat_n(if wanted { 1.0 } else { -3.0 } / 9.0, 9));
        }
    }
    p.extend(std::iter::repeat_n(-1.0, k));
    // conv3: 3x3 box on the own channel scaled by 2.5, plus the next channel
    // through the top-left tap only, so every object also lights up a
    // neighbouring detector with a shifted footprint
    for o in 0..k {
        for i in 0..k {
            if i == o {
                p.extend(std::iter::repeat_n(2.5 / 9.0, 9));
            } else if i == (o + 1) % k {
                p.push(1.0);
                p.extend(std::iter::repeat_n(0.0, 8));
            } else {
                p.extend(std::iter::repeat_n(0.0, 9));
            }
        }
    }
    p.extend(std::iter::repeat_n(0.1, k));
    // fc: spatial mean of the own channel (gain 8) minus 2x the others
    let plane = pooled * pooled;
    for o in 0..k {
        for i in 0..k {
            let w = if i == o { 8.0 } else { -1.0 } / plane as f32;
            p.extend(std::iter::repeat_n(w, plane));
        }
    }
    p.extend(std::iter::repeat_n(0.0, k));

    Model::from_parts(manifest, &p).expect("fixture model is valid")
}

fn draw_sample(rng: &mut ChaCha8Rng, bits: [u8; 3]) -> (RgbImage, [usize; 4]) {
    let mean = Preprocessing::imagenet().mean;
    let mut img = RgbImage::new(SIZE as u32, SIZE as u32);
    for px in img.pixels_mut() {
        let v = [0, 1, 2].map(|c| {
            let x = mean[c] + 0.2 * (rng.random::<f32>() - 0.5);
            (x * 255.0).round() as u8
        });
        *px = image::Rgb(v);
    }
    let w = rng.random_range(12..=22);
    let h = rng.random_range(12..=22);
    let x0 = rng.random_range(2..=SIZE - w - 2);
    let y0 = rng.random_range(2..=SIZE - h - 2);
    let ellipse = rng.random::<bool>();
    let (cx, cy) = (x0 as f32 + w as f32 / 2.0, y0 as f32 + h as f32 / 2.0);
    let (mut bx0, mut by0, mut bx1, mut by1) = (SIZE, SIZE, 0, 0);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if ellipse {
                let dx = (x as f32 + 0.5 - cx) / (w as f32 / 2.0);
                let dy = (y as f32 + 0.5 - cy) / (h as f32 / 2.0);
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            let v = bits.map(|b| {
                let jitter = 0.03 * rng.random::<f32>();
                let x = if b == 1 { 1.0 - jitter } else { jitter };
                (x * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(v));
            bx0 = bx0.min(x);
            by0 = by0.min(y);
            bx1 = bx1.max(x + 1);
            by1 = by1.max(y + 1);
        }
    }
    (img, [bx0, by0, bx1, by1])
}

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/shapes"));
    fs::create_dir_all(out.join("images")).expect("create output dirs");

    let model = build_model();
    model
        .save(&out.join("model.json"), &out.join("model.bin"))
        .expect("write model");

    let mut rng = ChaCha8Rng::seed_from_u64(20_240_917);
    let mut annotations = Vec::new();
    for i in 0..CLASSES.len() * IMAGES_PER_CLASS {
        let class = i % CLASSES.len();
        let (img, [x0, y0, x1, y1]) = draw_sample(&mut rng, CLASSES[class].1);
        let file = format!("images/{i:02}.png");
        img.save(out.join(&file)).expect("write image");
        annotations.push(json!({
            "image_id": format!("{i:02}_{}", CLASSES[class].0),
            "file": file,
            "class_index": class,
            "bbox": {"x0": x0, "y0": y0, "x1": x1, "y1": y1},
        }));
    }
    let mut text = serde_json::to_string_pretty(&annotations).expect("json");
    text.push('\n');
    fs::write(out.join("annotations.json"), text).expect("write annotations");
    println!("wrote fixture bundle to {}", out.display());
}
