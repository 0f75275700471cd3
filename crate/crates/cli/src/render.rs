//! Palette rendering of token grids.

use radar_core::error::Result;
use radar_core::grid::TokenGrid;
use radar_core::tokenizer::ToyImage;

pub const PALETTE_SIZE: usize = 64;

/// RGB of palette entry `id`: four levels per channel, red most significant.
/// Ids past the table wrap.
pub fn palette(id: u32) -> [u8; 3] {
    let i = id as usize % PALETTE_SIZE;
    let level = |v: usize| (v * 85) as u8;
    [level(i >> 4 & 3), level(i >> 2 & 3), level(i & 3)]
}

/// One `scale x scale` block of the id's palette colour per cell.
pub fn render_palette(grid: &TokenGrid, scale: usize) -> Result<ToyImage> {
    let s = scale.max(1);
    let (h, w) = (grid.height() * s, grid.width() * s);
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let rgb = palette(grid.get(r / s, c / s));
            data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
        }
    }
    ToyImage::new(h, w, 3, data)
}
