//! Timeline images: ground-truth actions on top, the top-scoring proposals
//! below, one row each.

use std::path::Path;

use abn::data_model::{ActionInstance, VideoRecord};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 800;
const MARGIN: u32 = 10;
const ROW: u32 = 14;
const GAP: u32 = 4;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const TRACK: Rgb<u8> = Rgb([235, 235, 235]);
const TRUTH: Rgb<u8> = Rgb([46, 139, 87]);
const TICK: Rgb<u8> = Rgb([150, 150, 150]);

fn fill(img: &mut RgbImage, x0: u32, x1: u32, y0: u32, y1: u32, c: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Blue shaded by score: pale for low scores, saturated for high ones.
fn proposal_colour(score: f64) -> Rgb<u8> {
    let s = score.clamp(0.0, 1.0);
    let mix = |lo: f64, hi: f64| (lo + (hi - lo) * s).round() as u8;
    Rgb([mix(190.0, 30.0), mix(210.0, 80.0), mix(240.0, 200.0)])
}

pub fn render(rec: &VideoRecord, proposals: &[ActionInstance], top_k: usize) -> RgbImage {
    let mut sorted: Vec<&ActionInstance> = proposals.iter().collect();
    sorted.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    sorted.truncate(top_k);
    let rows = 1 + sorted.len() as u32;
    let height = 2 * MARGIN + rows * ROW + rows.saturating_sub(1) * GAP + GAP + ROW / 2;
    let mut img = RgbImage::from_pixel(WIDTH, height, BACKGROUND);
    let span = (WIDTH - 2 * MARGIN) as f64;
    let to_x = |t: f64| MARGIN + ((t / rec.duration_seconds).clamp(0.0, 1.0) * span).round() as u32;

    let mut y = MARGIN;
    let draw_row = |img: &mut RgbImage, y: u32, items: &[(&ActionInstance, Rgb<u8>)]| {
        fill(img, MARGIN, WIDTH - MARGIN, y, y + ROW, TRACK);
        for (a, c) in items {
            let (x0, x1) = (to_x(a.start), to_x(a.end).max(to_x(a.start) + 1));
            fill(img, x0, x1, y, y + ROW, *c);
        }
    };
    let truth: Vec<_> = rec.actions.iter().map(|a| (a, TRUTH)).collect();
    draw_row(&mut img, y, &truth);
    y += ROW + GAP;
    for p in &sorted {
        draw_row(&mut img, y, &[(p, proposal_colour(p.score.unwrap_or(0.0)))]);
        y += ROW + GAP;
    }
    // Ticks at every tenth of the video.
    for i in 0..=10 {
        let x = MARGIN + (span * i as f64 / 10.0).round() as u32;
        fill(&mut img, x, x + 1, y, y + ROW / 2, TICK);
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<(), abn::Error> {
    img.save(path).map_err(|e| abn::Error::Io {
        path: path.into(),
        source: std::io::Error::other(e.to_string()),
    })
}
