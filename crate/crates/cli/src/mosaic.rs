//! Weight mosaics as binary PGM images.

use resom::{ResomError, Result, SomMap};

/// Tile shape for a map: the configured one, a square when the input
/// dimension is a perfect square, or a single row otherwise.
pub fn tile_shape(dim: usize, configured: Option<[usize; 2]>) -> Result<(usize, usize)> {
    if let Some([r, c]) = configured {
        if r * c != dim {
            return Err(ResomError::Param(format!(
                "tile: {r}x{c} does not cover input dimension {dim}"
            )));
        }
        return Ok((r, c));
    }
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        Ok((side, side))
    } else {
        Ok((1, dim))
    }
}

/// Lays the neuron weights out on the map grid, one tile per neuron, and
/// encodes the result as P5 with 8-bit gray levels.
pub fn render_pgm(map: &SomMap, tile: (usize, usize)) -> Result<Vec<u8>> {
    let p = map.params();
    let (tr, tc) = tile;
    if tr * tc != map.input_dim() {
        return Err(ResomError::Param(format!(
            "tile {tr}x{tc} does not cover input dimension {}",
            map.input_dim()
        )));
    }
    let (w, h) = (p.width * tc, p.height * tr);
    let mut pixels = vec![0u8; w * h];
    for n in 0..map.neurons() {
        let (row, col) = map.position(n);
        for (i, v) in map.weight(n).iter().enumerate() {
            let px = col * tc + i % tc;
            let py = row * tr + i / tc;
            pixels[py * w + px] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
