//! Built-in 5x7 bitmap font. Each glyph is five column bytes, least
//! significant bit at the top; bit 7 holds descenders.

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 8;
/// Blank columns between glyphs.
pub const GLYPH_GAP: usize = 1;

const DIGITS: [[u8; 5]; 10] = [
    [0x3E, 0x51, 0x49, 0x45, 0x3E],
    [0x00, 0x42, 0x7F, 0x40, 0x00],
    [0x72, 0x49, 0x49, 0x49, 0x46],
    [0x21, 0x41, 0x49, 0x4D, 0x33],
    [0x18, 0x14, 0x12, 0x7F, 0x10],
    [0x27, 0x45, 0x45, 0x45, 0x39],
    [0x3C, 0x4A, 0x49, 0x49, 0x31],
    [0x41, 0x21, 0x11, 0x09, 0x07],
    [0x36, 0x49, 0x49, 0x49, 0x36],
    [0x46, 0x49, 0x49, 0x29, 0x1E],
];

const UPPER: [[u8; 5]; 26] = [
    [0x7C, 0x12, 0x11, 0x12, 0x7C],
    [0x7F, 0x49, 0x49, 0x49, 0x36],
    [0x3E, 0x41, 0x41, 0x41, 0x22],
    [0x7F, 0x41, 0x41, 0x41, 0x3E],
    [0x7F, 0x49, 0x49, 0x49, 0x41],
    [0x7F, 0x09, 0x09, 0x09, 0x01],
    [0x3E, 0x41, 0x41, 0x51, 0x73],
    [0x7F, 0x08, 0x08, 0x08, 0x7F],
    [0x00, 0x41, 0x7F, 0x41, 0x00],
    [0x20, 0x40, 0x41, 0x3F, 0x01],
    [0x7F, 0x08, 0x14, 0x22, 0x41],
    [0x7F, 0x40, 0x40, 0x40, 0x40],
    [0x7F, 0x02, 0x1C, 0x02, 0x7F],
    [0x7F, 0x04, 0x08, 0x10, 0x7F],
    [0x3E, 0x41, 0x41, 0x41, 0x3E],
    [0x7F, 0x09, 0x09, 0x09, 0x06],
    [0x3E, 0x41, 0x51, 0x21, 0x5E],
    [0x7F, 0x09, 0x19, 0x29, 0x46],
    [0x26, 0x49, 0x49, 0x49, 0x32],
    [0x03, 0x01, 0x7F, 0x01, 0x03],
    [0x3F, 0x40, 0x40, 0x40, 0x3F],
    [0x1F, 0x20, 0x40, 0x20, 0x1F],
    [0x3F, 0x40, 0x38, 0x40, 0x3F],
    [0x63, 0x14, 0x08, 0x14, 0x63],
    [0x03, 0x04, 0x78, 0x04, 0x03],
    [0x61, 0x59, 0x49, 0x4D, 0x43],
];

const LOWER: [[u8; 5]; 26] = [
    [0x20, 0x54, 0x54, 0x78, 0x40],
    [0x7F, 0x28, 0x44, 0x44, 0x38],
    [0x38, 0x44, 0x44, 0x44, 0x28],
    [0x38, 0x44, 0x44, 0x28, 0x7F],
    [0x38, 0x54, 0x54, 0x54, 0x18],
    [0x00, 0x08, 0x7E, 0x09, 0x02],
    [0x18, 0xA4, 0xA4, 0x9C, 0x78],
    [0x7F, 0x08, 0x04, 0x04, 0x78],
    [0x00, 0x44, 0x7D, 0x40, 0x00],
    [0x20, 0x40, 0x40, 0x3D, 0x00],
    [0x7F, 0x10, 0x28, 0x44, 0x00],
    [0x00, 0x41, 0x7F, 0x40, 0x00],
    [0x7C, 0x04, 0x78, 0x04, 0x78],
    [0x7C, 0x08, 0x04, 0x04, 0x78],
    [0x38, 0x44, 0x44, 0x44, 0x38],
    [0xFC, 0x18, 0x24, 0x24, 0x18],
    [0x18, 0x24, 0x24, 0x18, 0xFC],
    [0x7C, 0x08, 0x04, 0x04, 0x08],
    [0x48, 0x54, 0x54, 0x54, 0x24],
    [0x04, 0x04, 0x3F, 0x44, 0x24],
    [0x3C, 0x40, 0x40, 0x20, 0x7C],
    [0x1C, 0x20, 0x40, 0x20, 0x1C],
    [0x3C, 0x40, 0x30, 0x40, 0x3C],
    [0x44, 0x28, 0x10, 0x28, 0x44],
    [0x4C, 0x90, 0x90, 0x90, 0x7C],
    [0x44, 0x64, 0x54, 0x4C, 0x44],
];

/// Column bytes for `ch`, if the font has it.
pub fn glyph(ch: char) -> Option<[u8; 5]> {
    match ch {
        '0'..='9' => Some(DIGITS[ch as usize - '0' as usize]),
        'A'..='Z' => Some(UPPER[ch as usize - 'A' as usize]),
        'a'..='z' => Some(LOWER[ch as usize - 'a' as usize]),
        _ => None,
    }
}

/// Width in font dots of a rendered string.
pub fn text_dots(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        len * (GLYPH_COLS + GLYPH_GAP) - GLYPH_GAP
    }
}

/// Dot-level bitmap of `text`: `(width, rows)` with row-major `bool`s.
pub fn rasterize(text: &str) -> Option<(usize, Vec<bool>)> {
    let chars: Vec<char> = text.chars().collect();
    let w = text_dots(chars.len());
    let mut bits = vec![false; w * GLYPH_ROWS];
    for (i, &ch) in chars.iter().enumerate() {
        let g = glyph(ch)?;
        for (c, col) in g.iter().enumerate() {
            let x = i * (GLYPH_COLS + GLYPH_GAP) + c;
            for r in 0..GLYPH_ROWS {
                if col >> r & 1 == 1 {
                    bits[r * w + x] = true;
                }
            }
        }
    }
    Some((w, bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn glyphs_are_distinct_and_inked() {
        let all: Vec<char> = ('0'..='9').chain('A'..='Z').chain('a'..='z').collect();
        let set: HashSet<[u8; 5]> = all.iter().map(|&c| glyph(c).unwrap()).collect();
        assert_eq!(set.len(), all.len());
        assert!(set.iter().all(|g| g.iter().any(|&c| c != 0)));
        assert!(glyph('é').is_none());
    }

    #[test]
    fn raster_layout() {
        let (w, bits) = rasterize("11").unwrap();
        assert_eq!(w, 11);
        // The digit one has its stem in column 2 of each glyph.
        assert!((1..7).all(|r| bits[r * w + 2] && bits[r * w + 8]));
        assert!((0..GLYPH_ROWS).all(|r| !bits[r * w + 5]));
    }
}
