//! Procedural garment silhouettes: a 10-class, 28×28 grayscale task in the
//! spirit of clothing-image benchmarks, generated offline from a seed.
//!
//! Each class is a union of polygons and ellipses with randomized size,
//! position, fill intensity and texture, rendered with 3×3 supersampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::Result;
use crate::nets::ImageShape;
use crate::seed;
use crate::tape::Mat;

pub const CLASS_NAMES: [&str; 10] = [
    "tshirt", "trouser", "pullover", "dress", "coat", "sandal", "shirt", "sneaker", "bag", "boot",
];

const SIZE: usize = 28;

#[derive(Debug, Clone)]
enum Shape {
    Poly(Vec<(f64, f64)>),
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Poly(pts) => {
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Shape {
    Shape::Poly(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
}

/// A layer of shapes drawn with one intensity (later layers overwrite).
struct Layer {
    shapes: Vec<Shape>,
    level: f64,
}

struct Garment {
    layers: Vec<Layer>,
    /// Texture: horizontal stripes, vertical stripes or checks.
    texture: Texture,
}

#[derive(Clone, Copy)]
enum Texture {
    Plain,
    HStripes(f64, f64),
    Checks(f64, f64),
}

fn u(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn garment(class: usize, rng: &mut ChaCha8Rng) -> Garment {
    let cx = 14.0 + u(rng, -1.5, 1.5);
    let s = u(rng, 0.85, 1.1);
    let base = u(rng, 0.45, 0.95);
    let mut layers = Vec::new();
    let mut texture = Texture::Plain;
    let body = |top: f64, bottom: f64, half: f64| rect(cx - half, top, cx + half, bottom);
    match class {
        // t-shirt: torso with short sleeves
        0 => {
            let half = 6.0 * s;
            let (top, bottom) = (5.0 + u(rng, -1.0, 1.0), 23.0 * s.min(1.0) + u(rng, 0.0, 2.0));
            let sl = u(rng, 4.0, 6.0);
            layers.push(Layer {
                shapes: vec![
                    body(top, bottom, half),
                    Shape::Poly(vec![
                        (cx - half, top),
                        (cx - half - sl, top + 3.0),
                        (cx - half - sl + 2.0, top + 8.0),
                        (cx - half, top + 7.0),
                    ]),
                    Shape::Poly(vec![
                        (cx + half, top),
                        (cx + half + sl, top + 3.0),
                        (cx + half + sl - 2.0, top + 8.0),
                        (cx + half, top + 7.0),
                    ]),
                ],
                level: base,
            });
            layers.push(Layer {
                shapes: vec![Shape::Ellipse { cx, cy: top, rx: 2.5, ry: 1.5 }],
                level: 0.0,
            });
            if rng.gen_bool(0.4) {
                texture = Texture::HStripes(u(rng, 2.0, 4.0), u(rng, 0.5, 0.8));
            }
        }
        // trousers: two long legs joined at the waist
        1 => {
            let half = u(rng, 4.5, 6.0) * s;
            let (top, bottom) = (2.5 + u(rng, 0.0, 1.5), 26.0 - u(rng, 0.0, 1.5));
            let gap = u(rng, 0.6, 1.4);
            layers.push(Layer {
                shapes: vec![
                    rect(cx - half, top, cx + half, top + 5.0),
                    Shape::Poly(vec![
                        (cx - half, top),
                        (cx - gap, top + 5.0),
                        (cx - gap - 0.5, bottom),
                        (cx - half - 1.0, bottom),
                    ]),
                    Shape::Poly(vec![
                        (cx + half, top),
                        (cx + gap, top + 5.0),
                        (cx + gap + 0.5, bottom),
                        (cx + half + 1.0, bottom),
                    ]),
                ],
                level: base,
            });
        }
        // pullover: torso with long sleeves hanging down
        2 | 4 | 6 => {
            let half = u(rng, 5.5, 7.0) * s;
            let top = 4.0 + u(rng, -1.0, 1.0);
            let bottom = if class == 4 { 26.0 - u(rng, 0.0, 1.0) } else { 22.0 + u(rng, 0.0, 2.0) };
            let sw = u(rng, 2.5, 3.5);
            let drop = u(rng, 16.0, 20.0);
            layers.push(Layer {
                shapes: vec![
                    body(top, bottom, half),
                    Shape::Poly(vec![
                        (cx - half, top),
                        (cx - half - sw - 1.5, top + drop),
                        (cx - half - 1.0, top + drop + 0.5),
                        (cx - half, top + 6.0),
                    ]),
                    Shape::Poly(vec![
                        (cx + half, top),
                        (cx + half + sw + 1.5, top + drop),
                        (cx + half + 1.0, top + drop + 0.5),
                        (cx + half, top + 6.0),
                    ]),
                ],
                level: base,
            });
            match class {
                2 => {
                    layers.push(Layer {
                        shapes: vec![Shape::Ellipse { cx, cy: top, rx: 2.5, ry: 1.2 }],
                        level: 0.0,
                    });
                    layers.push(Layer {
                        shapes: vec![rect(cx - half, bottom - 1.5, cx + half, bottom)],
                        level: (base * 0.7).max(0.2),
                    });
                }
                4 => {
                    // coat: open front and buttons
                    let mut buttons = vec![rect(cx - 0.4, top + 1.0, cx + 0.4, bottom)];
                    for k in 0..4 {
                        buttons.push(Shape::Ellipse {
                            cx: cx + 1.6,
                            cy: top + 4.0 + 4.0 * k as f64,
                            rx: 0.7,
                            ry: 0.7,
                        });
                    }
                    layers.push(Layer { shapes: buttons, level: (base * 0.35).min(0.3) });
                    layers.push(Layer {
                        shapes: vec![Shape::Poly(vec![(cx - 3.0, top), (cx + 3.0, top), (cx, top + 5.0)])],
                        level: 0.0,
                    });
                }
                _ => {
                    // shirt: collar, button placket, checks
                    layers.push(Layer {
                        shapes: vec![
                            Shape::Poly(vec![(cx - 3.0, top - 1.0), (cx, top + 3.0), (cx - 1.0, top + 4.0), (cx - 4.0, top + 1.0)]),
                            Shape::Poly(vec![(cx + 3.0, top - 1.0), (cx, top + 3.0), (cx + 1.0, top + 4.0), (cx + 4.0, top + 1.0)]),
                        ],
                        level: 1.0_f64.min(base + 0.3),
                    });
                    layers.push(Layer {
                        shapes: vec![rect(cx - 0.3, top + 4.0, cx + 0.3, bottom)],
                        level: base * 0.5,
                    });
                    texture = Texture::Checks(u(rng, 2.5, 4.0), u(rng, 0.55, 0.8));
                }
            }
        }
        // dress: narrow top flaring to a wide hem
        3 => {
            let top = 2.5 + u(rng, 0.0, 2.0);
            let bottom = 26.0 - u(rng, 0.0, 1.5);
            let t = u(rng, 2.5, 4.0) * s;
            let w = u(rng, 3.0, 4.5) * s;
            let b = u(rng, 6.5, 9.0) * s;
            let waist = top + u(rng, 6.0, 9.0);
            layers.push(Layer {
                shapes: vec![Shape::Poly(vec![
                    (cx - t, top),
                    (cx + t, top),
                    (cx + w, waist),
                    (cx + b, bottom),
                    (cx - b, bottom),
                    (cx - w, waist),
                ])],
                level: base,
            });
            if rng.gen_bool(0.5) {
                texture = Texture::HStripes(u(rng, 1.5, 3.0), u(rng, 0.6, 0.85));
            }
        }
        // sandal: thin sole with straps
        5 => {
            let y = 20.0 + u(rng, -2.0, 2.0);
            let half = u(rng, 9.0, 11.5) * s;
            let mut shapes = vec![Shape::Poly(vec![
                (cx - half, y),
                (cx + half, y - 1.0),
                (cx + half, y + 1.5),
                (cx - half, y + 2.0),
            ])];
            let straps = rng.gen_range(2..5);
            for k in 0..straps {
                let x0 = cx - half + 3.0 + k as f64 * (2.0 * half - 6.0) / straps as f64;
                let h = u(rng, 4.0, 8.0);
                shapes.push(Shape::Poly(vec![
                    (x0, y),
                    (x0 + 1.0, y),
                    (x0 + 3.5, y - h),
                    (x0 + 2.5, y - h),
                ]));
            }
            shapes.push(rect(cx - half, y + 1.5, cx - half + 3.0, y + 4.0));
            layers.push(Layer { shapes, level: base });
        }
        // sneaker: low rounded shoe with a light sole
        7 => {
            let y = 21.0 + u(rng, -2.0, 2.0);
            let half = u(rng, 10.0, 12.0) * s;
            let h = u(rng, 6.0, 8.0);
            layers.push(Layer {
                shapes: vec![
                    Shape::Poly(vec![
                        (cx - half, y),
                        (cx - half, y - h),
                        (cx - half + 5.0, y - h - 1.0),
                        (cx, y - h + 2.0),
                        (cx + half - 1.0, y - 2.0),
                        (cx + half, y),
                    ]),
                    Shape::Ellipse { cx: cx + half - 3.0, cy: y - 1.5, rx: 3.0, ry: 2.0 },
                ],
                level: base,
            });
            layers.push(Layer {
                shapes: vec![rect(cx - half, y - 0.5, cx + half, y + 1.5)],
                level: (base + 0.35).min(1.0),
            });
            let mut laces = Vec::new();
            for k in 0..3 {
                let x0 = cx - half + 6.0 + 2.2 * k as f64;
                laces.push(rect(x0, y - h + 1.0 + k as f64, x0 + 1.0, y - h + 2.0 + k as f64));
            }
            layers.push(Layer { shapes: laces, level: base * 0.3 });
        }
        // bag: box with a handle
        8 => {
            let half = u(rng, 7.0, 10.0) * s;
            let top = 11.0 + u(rng, -2.0, 2.0);
            let bottom = top + u(rng, 11.0, 14.0);
            let hr = u(rng, 3.0, 5.5);
            layers.push(Layer {
                shapes: vec![
                    Shape::Ellipse { cx, cy: top, rx: hr + 1.3, ry: hr * 1.2 + 1.3 },
                ],
                level: base,
            });
            layers.push(Layer {
                shapes: vec![Shape::Ellipse { cx, cy: top, rx: hr, ry: hr * 1.2 }],
                level: 0.0,
            });
            layers.push(Layer {
                shapes: vec![rect(cx - half, top, cx + half, bottom)],
                level: base,
            });
            if rng.gen_bool(0.5) {
                layers.push(Layer {
                    shapes: vec![rect(cx - half, top + 3.0, cx + half, top + 4.0)],
                    level: base * 0.5,
                });
            }
        }
        // ankle boot: shaft plus foot and heel
        _ => {
            let bottom = 24.0 + u(rng, -1.5, 1.5);
            let shaft_w = u(rng, 7.0, 9.0) * s;
            let shaft_h = u(rng, 11.0, 15.0);
            let foot = u(rng, 18.0, 22.0) * s;
            let x0 = cx - foot / 2.0;
            layers.push(Layer {
                shapes: vec![
                    rect(x0, bottom - shaft_h, x0 + shaft_w, bottom),
                    Shape::Poly(vec![
                        (x0, bottom - 7.0),
                        (x0 + foot - 3.0, bottom - 5.0),
                        (x0 + foot, bottom - 2.0),
                        (x0 + foot, bottom),
                        (x0, bottom),
                    ]),
                ],
                level: base,
            });
            layers.push(Layer {
                shapes: vec![rect(x0, bottom - 1.0, x0 + 3.5, bottom + 1.5)],
                level: (base * 0.6).max(0.2),
            });
        }
    }
    Garment { layers, texture }
}

fn render(g: &Garment, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const SS: usize = 3;
    let noise = u(rng, 0.0, 0.06);
    let mut out = vec![0.0; SIZE * SIZE];
    for py in 0..SIZE {
        for px in 0..SIZE {
            let mut acc = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    let mut v: f64 = 0.0;
                    let mut covered = false;
                    for layer in &g.layers {
                        if layer.shapes.iter().any(|s| s.contains(x, y)) {
                            v = layer.level;
                            covered = true;
                        }
                    }
                    if covered {
                        v *= match g.texture {
                            Texture::Plain => 1.0,
                            Texture::HStripes(p, k) => {
                                if (y / p).floor() as i64 % 2 == 0 { 1.0 } else { k }
                            }
                            Texture::Checks(p, k) => {
                                if ((x / p).floor() as i64 + (y / p).floor() as i64) % 2 == 0 { 1.0 } else { k }
                            }
                        };
                    }
                    acc += v;
                }
            }
            let mut v = acc / (SS * SS) as f64;
            if v > 0.0 {
                v += u(rng, -noise, noise);
            }
            out[py * SIZE + px] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// `n` images with balanced, interleaved labels (`i mod 10`).
pub fn garments(n: usize, seed_value: u64) -> Result<Dataset> {
    let mut x = Mat::zeros((n, SIZE * SIZE));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASS_NAMES.len();
        let mut rng = seed::rng(seed::derive(seed_value, "garment", i as u64));
        let g = garment(class, &mut rng);
        let px = render(&g, &mut rng);
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&px[..]));
        labels.push(class);
    }
    Dataset::new(x, labels, ImageShape::new(SIZE, SIZE, 1), CLASS_NAMES.len())
}
