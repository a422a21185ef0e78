//! Procedural sharp images: a smooth background with rectangles, discs and
//! thin strokes, giving plenty of edges for a deblurring model to recover.

use rand::Rng;

use crate::tensor::Tensor;

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn paint(img: &mut Tensor, y: usize, x: usize, rgb: [f64; 3]) {
    for (c, v) in rgb.into_iter().enumerate() {
        img.set3(c, y, x, v);
    }
}

pub fn synth_sharp<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let mut img = Tensor::zeros([3, h, w]);
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, co) = angle.sin_cos();
    let span = (h + w) as f64;
    for y in 0..h {
        for x in 0..w {
            let t = (0.5 + (x as f64 * co + y as f64 * s) / span).clamp(0.0, 1.0);
            paint(&mut img, y, x, [0, 1, 2].map(|c| c0[c] + t * (c1[c] - c0[c])));
        }
    }
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..rng.random_range(3..7) {
        let rgb = color(rng);
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, rw) = (rng.random_range(h / 8..=h / 2), rng.random_range(w / 8..=w / 2));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                paint(&mut img, y, x, rgb);
            }
        }
    }
    for _ in 0..rng.random_range(2..5) {
        let rgb = color(rng);
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let rad = rng.random_range(hf.min(wf) / 10.0..hf.min(wf) / 4.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= rad * rad {
                    paint(&mut img, y, x, rgb);
                }
            }
        }
    }
    // Text-like strokes: short one-pixel polylines.
    for _ in 0..rng.random_range(4..9) {
        let rgb = color(rng);
        let (mut y, mut x) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        for _ in 0..rng.random_range(2..5) {
            let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(3.0..hf.min(wf) / 3.0);
            let steps = (2.0 * len) as usize;
            for _ in 0..steps {
                y = (y + 0.5 * dir.sin()).clamp(0.0, hf - 1.0);
                x = (x + 0.5 * dir.cos()).clamp(0.0, wf - 1.0);
                paint(&mut img, y.round() as usize, x.round() as usize, rgb);
            }
        }
    }
    img
}
