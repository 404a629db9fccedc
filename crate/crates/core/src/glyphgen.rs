//! Procedural text-line images.
//!
//! Each character owns a 5×7 stroke grid. In the synthetic alphabet the grids
//! come in clusters of four: one base pattern plus three variants that move two
//! cells each, so cluster members look alike. Lines are built by scaling the
//! grids to the image height and placing them left to right with per-glyph
//! jitter; some gaps are squeezed into overlaps or stretched apart.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::vocab::{ConfusionSet, Vocabulary, CLUSTER_SIZE};

pub const GRID_COLS: usize = 5;
pub const GRID_ROWS: usize = 7;
const GRID_CELLS: usize = GRID_COLS * GRID_ROWS;

pub const BACKGROUND: f32 = 1.0;

/// Grayscale image, row-major, 1.0 = white paper, 0.0 = ink.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    /// Width of the rendered content before right padding.
    pub valid_width: usize,
}

impl GlyphImage {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![BACKGROUND; height * width],
            valid_width: width,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixels darker than mid-gray.
    pub fn ink_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p < 0.5).collect()
    }

    /// Snap every pixel to the nearest 8-bit level so that an in-memory image
    /// and its PGM copy are identical.
    pub fn quantize(&mut self) {
        for p in &mut self.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Binary PGM (`P5`, 8-bit).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_pgm()).map_err(io_err(path))
    }

    /// Parses a binary PGM. `valid_width` is set to the full width; callers
    /// that know better overwrite it.
    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Image {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        pos += 1;
        let data = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated pixels"))?;
        Ok(Self {
            height,
            width,
            pixels: data.iter().map(|&b| b as f32 / 255.0).collect(),
            valid_width: width,
        })
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_pgm(&bytes, path)
    }
}

/// `|a ∩ b| / |a ∪ b|` over ink pixels of two equally sized images.
pub fn ink_overlap(a: &GlyphImage, b: &GlyphImage) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let (ma, mb) = (a.ink_mask(), b.ink_mask());
    let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
    let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Writer-level rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphStyle {
    pub style_id: u32,
    pub x_shift: i32,
    pub y_shift: i32,
    /// -1 thins strokes by a pixel, +1 thickens them.
    pub thickness: i32,
    /// In `[0.7, 1.4]`.
    pub width_scale: f32,
}

impl Default for GlyphStyle {
    fn default() -> Self {
        Self {
            style_id: 0,
            x_shift: 0,
            y_shift: 0,
            thickness: 0,
            width_scale: 1.0,
        }
    }
}

impl GlyphStyle {
    pub const MIN_SCALE: f32 = 0.7;
    pub const MAX_SCALE: f32 = 1.4;

    pub fn random(style_id: u32, rng: &mut impl Rng) -> Self {
        Self {
            style_id,
            x_shift: rng.gen_range(-1..=1),
            y_shift: rng.gen_range(-1..=1),
            thickness: *[-1, 0, 0, 1].get(rng.gen_range(0..4)).expect("in range"),
            width_scale: rng.gen_range(0.85..=1.15),
        }
    }

    fn clamped_scale(&self) -> f32 {
        self.width_scale.clamp(Self::MIN_SCALE, Self::MAX_SCALE)
    }
}

/// Line-level options beyond the style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineOptions {
    /// Chance, per adjacent pair, that the gap is squeezed into an overlap or stretched.
    pub ligature_prob: f64,
    /// Chance, per character, that it is drawn as the union of its own strokes
    /// and those of a shape-similar partner.
    pub confusion_prob: f64,
    /// Uniform pixel noise amplitude.
    pub noise: f32,
    /// Per-glyph jitter on top of the style.
    pub jitter: bool,
}

impl Default for LineOptions {
    fn default() -> Self {
        Self {
            ligature_prob: 0.0,
            confusion_prob: 0.0,
            noise: 0.0,
            jitter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedLine {
    pub image: GlyphImage,
    pub content: String,
    /// Positions drawn as a blend with a shape-similar partner.
    pub blended: Vec<usize>,
    /// Glyph widths and the gaps between them, left to right.
    pub widths: Vec<usize>,
    pub gaps: Vec<isize>,
}

type Grid = [bool; GRID_CELLS];

/// Stroke grids for every vocabulary character.
#[derive(Clone, Debug)]
pub struct GlyphBank {
    vocab: Vocabulary,
    grids: Vec<Grid>,
    img_height: usize,
    /// Inter-glyph spacing in pixels when no ligature applies.
    pub gap: usize,
}

fn cell(g: &Grid, col: usize, row: usize) -> bool {
    g[row * GRID_COLS + col]
}

fn count(g: &Grid) -> usize {
    g.iter().filter(|&&b| b).count()
}

fn hamming(a: &Grid, b: &Grid) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn jaccard(a: &Grid, b: &Grid) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    inter as f64 / union.max(1) as f64
}

fn random_strokes(rng: &mut impl Rng) -> Grid {
    loop {
        let mut g = [false; GRID_CELLS];
        for _ in 0..rng.gen_range(3..=4) {
            match rng.gen_range(0..3) {
                0 => {
                    let row = rng.gen_range(0..GRID_ROWS);
                    let len = rng.gen_range(3..=GRID_COLS);
                    let start = rng.gen_range(0..=GRID_COLS - len);
                    for c in start..start + len {
                        g[row * GRID_COLS + c] = true;
                    }
                }
                1 => {
                    let col = rng.gen_range(0..GRID_COLS);
                    let len = rng.gen_range(4..=GRID_ROWS);
                    let start = rng.gen_range(0..=GRID_ROWS - len);
                    for r in start..start + len {
                        g[r * GRID_COLS + col] = true;
                    }
                }
                _ => {
                    let len = rng.gen_range(3..=4);
                    let c0 = rng.gen_range(0..=GRID_COLS - len);
                    let r0 = rng.gen_range(0..=GRID_ROWS - len);
                    let down = rng.gen_bool(0.5);
                    for k in 0..len {
                        let c = if down { c0 + k } else { c0 + len - 1 - k };
                        g[(r0 + k) * GRID_COLS + c] = true;
                    }
                }
            }
        }
        let n = count(&g);
        // strokes should reach both the left and right halves of the box
        let spans = (0..GRID_ROWS).any(|r| cell(&g, 0, r)) && (0..GRID_ROWS).any(|r| cell(&g, GRID_COLS - 1, r));
        if (13..=20).contains(&n) && spans {
            return g;
        }
    }
}

/// Base grid with one stroke cell removed and one neighbouring cell added.
fn variant_of(base: &Grid, rng: &mut impl Rng) -> Grid {
    loop {
        let mut g = *base;
        let on: Vec<usize> = (0..GRID_CELLS).filter(|&i| g[i]).collect();
        let off_near: Vec<usize> = (0..GRID_CELLS)
            .filter(|&i| !g[i])
            .filter(|&i| {
                let (c, r) = ((i % GRID_COLS) as isize, (i / GRID_COLS) as isize);
                [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dc, dr)| {
                    let (nc, nr) = (c + dc, r + dr);
                    nc >= 0
                        && nr >= 0
                        && (nc as usize) < GRID_COLS
                        && (nr as usize) < GRID_ROWS
                        && g[nr as usize * GRID_COLS + nc as usize]
                })
            })
            .collect();
        g[on[rng.gen_range(0..on.len())]] = false;
        g[off_near[rng.gen_range(0..off_near.len())]] = true;
        if hamming(&g, base) == 2 {
            return g;
        }
    }
}

impl GlyphBank {
    /// Grids for the synthetic alphabet: consecutive groups of
    /// [`CLUSTER_SIZE`] characters share a base pattern.
    pub fn synthetic(vocab: &Vocabulary, img_height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c79_7068);
        let mut grids: Vec<Grid> = Vec::with_capacity(vocab.num_chars());
        let mut bases: Vec<Grid> = Vec::new();
        let w = (img_height / 2).max(GRID_COLS);
        for group in vocab.chars().chunks(CLUSTER_SIZE) {
            let members = loop {
                let base = random_strokes(&mut rng);
                if !bases.iter().all(|o| hamming(o, &base) >= 8) {
                    continue;
                }
                let mut members = vec![base];
                for _ in 0..200 {
                    if members.len() == group.len() {
                        break;
                    }
                    let v = variant_of(&base, &mut rng);
                    let ok = members.iter().all(|m| {
                        hamming(m, &v) >= 2
                            && jaccard(m, &v) >= 0.75
                            && min_pixel_overlap(m, &v, w, img_height) >= 0.72
                    });
                    if ok {
                        members.push(v);
                    }
                }
                if members.len() == group.len() {
                    bases.push(base);
                    break members;
                }
            };
            grids.extend(members);
        }
        Self {
            vocab: vocab.clone(),
            grids,
            img_height,
            gap: 2,
        }
    }

    /// Independent random grids, for vocabularies without built-in clusters.
    pub fn independent(vocab: &Vocabulary, img_height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696e_6470);
        let grids = (0..vocab.num_chars()).map(|_| random_strokes(&mut rng)).collect();
        Self {
            vocab: vocab.clone(),
            grids,
            img_height,
            gap: 2,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn img_height(&self) -> usize {
        self.img_height
    }

    /// Unscaled glyph width.
    pub fn base_width(&self) -> usize {
        (self.img_height / 2).max(GRID_COLS)
    }

    fn grid(&self, c: char) -> Result<&Grid> {
        let id = self.vocab.id_of(c).ok_or(Error::UnknownChar { pos: 0, ch: c })?;
        Ok(&self.grids[id])
    }

    pub fn glyph_width(&self, style: &GlyphStyle) -> usize {
        ((self.base_width() as f32 * style.clamped_scale()).round() as usize).max(GRID_COLS)
    }

    fn draw(&self, grid: &Grid, style: &GlyphStyle, rng: &mut impl Rng) -> GlyphImage {
        let (w, h) = (self.glyph_width(style), self.img_height);
        let ink = rasterize(grid, w, h, style);
        let level: f32 = rng.gen_range(0.0..0.15);
        let mut img = GlyphImage::blank(h, w);
        for (p, &on) in img.pixels.iter_mut().zip(&ink) {
            if on {
                *p = level;
            }
        }
        img
    }

    pub fn render_char(&self, c: char, style: &GlyphStyle, rng: &mut impl Rng) -> Result<GlyphImage> {
        Ok(self.draw(self.grid(c)?, style, rng))
    }

    /// `c` drawn with the union of its strokes and `partner`'s.
    pub fn render_blend(
        &self,
        c: char,
        partner: char,
        style: &GlyphStyle,
        rng: &mut impl Rng,
    ) -> Result<GlyphImage> {
        let (a, b) = (self.grid(c)?, self.grid(partner)?);
        let mut g = *a;
        for (x, y) in g.iter_mut().zip(b) {
            *x |= *y;
        }
        Ok(self.draw(&g, style, rng))
    }

    /// Renders `text` with style jitter and the given ligature probability.
    pub fn render_line(
        &self,
        text: &str,
        style: &GlyphStyle,
        ligature_prob: f64,
        rng: &mut impl Rng,
    ) -> Result<(GlyphImage, String)> {
        let opts = LineOptions {
            ligature_prob,
            ..LineOptions::default()
        };
        let line = self.render_line_with(text, style, &opts, None, rng)?;
        Ok((line.image, line.content))
    }

    pub fn render_line_with(
        &self,
        text: &str,
        style: &GlyphStyle,
        opts: &LineOptions,
        confusion: Option<&ConfusionSet>,
        rng: &mut impl Rng,
    ) -> Result<RenderedLine> {
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Err(Error::EmptyText);
        }
        for (pos, &ch) in chars.iter().enumerate() {
            if !self.vocab.contains(ch) {
                return Err(Error::UnknownChar { pos, ch });
            }
        }
        let mut glyphs = Vec::with_capacity(chars.len());
        let mut blended = Vec::new();
        for (i, &c) in chars.iter().enumerate() {
            let mut s = *style;
            if opts.jitter {
                s.x_shift += rng.gen_range(-1..=1);
                s.y_shift += rng.gen_range(-1..=1);
                s.width_scale *= rng.gen_range(0.92..=1.08);
            }
            let partner = match confusion {
                Some(cs) if opts.confusion_prob > 0.0 && rng.gen_bool(opts.confusion_prob) => {
                    cs.sample_confusion(c, rng).ok()
                }
                _ => None,
            };
            let g = match partner {
                Some(p) => {
                    blended.push(i);
                    self.render_blend(c, p, &s, rng)?
                }
                None => self.render_char(c, &s, rng)?,
            };
            glyphs.push(g);
        }

        let base = self.base_width() as isize;
        let mut gaps = Vec::with_capacity(glyphs.len().saturating_sub(1));
        for _ in 1..glyphs.len() {
            let mut gap = self.gap as isize;
            if opts.ligature_prob > 0.0 && rng.gen_bool(opts.ligature_prob) {
                gap = if rng.gen_bool(0.5) {
                    -(base / 5)
                } else {
                    gap + base / 3
                };
            }
            gaps.push(gap);
        }
        let widths: Vec<usize> = glyphs.iter().map(|g| g.width).collect();
        let total = widths.iter().sum::<usize>() as isize + gaps.iter().sum::<isize>();
        let h = self.img_height;
        let mut img = GlyphImage::blank(h, total.max(1) as usize);
        let mut x0: isize = 0;
        for (k, g) in glyphs.iter().enumerate() {
            for y in 0..h {
                for x in 0..g.width {
                    let tx = x0 + x as isize;
                    if tx < 0 || tx >= img.width as isize {
                        continue;
                    }
                    let v = img.get(tx as usize, y).min(g.get(x, y));
                    img.set(tx as usize, y, v);
                }
            }
            x0 += g.width as isize + gaps.get(k).copied().unwrap_or(0);
        }
        if opts.noise > 0.0 {
            for p in &mut img.pixels {
                *p = (*p + rng.gen_range(-opts.noise..=opts.noise)).clamp(0.0, 1.0);
            }
        }
        img.quantize();
        img.valid_width = img.width;
        Ok(RenderedLine {
            image: img,
            content: text.to_string(),
            blended,
            widths,
            gaps,
        })
    }
}

fn rasterize(grid: &Grid, w: usize, h: usize, style: &GlyphStyle) -> Vec<bool> {
    let margin = (h / 16).max(1);
    let row_h = ((h - 2 * margin) / GRID_ROWS).max(1);
    let mut ink = vec![false; w * h];
    for y in 0..h {
        let ly = y as i32 - margin as i32 - style.y_shift;
        if ly < 0 || ly >= (row_h * GRID_ROWS) as i32 {
            continue;
        }
        let row = ly as usize / row_h;
        for x in 0..w {
            let lx = x as i32 - style.x_shift;
            if lx < 0 || lx >= w as i32 {
                continue;
            }
            ink[y * w + x] = cell(grid, (lx as usize * GRID_COLS) / w, row);
        }
    }
    match style.thickness.signum() {
        1 => dilate(&ink, w, h),
        -1 => thin(&ink, w, h),
        _ => ink,
    }
}

/// Worst pixel-level overlap between two grids across stroke thicknesses.
fn min_pixel_overlap(a: &Grid, b: &Grid, w: usize, h: usize) -> f64 {
    [-1, 0, 1]
        .iter()
        .map(|&thickness| {
            let s = GlyphStyle {
                thickness,
                ..GlyphStyle::default()
            };
            let (ma, mb) = (rasterize(a, w, h, &s), rasterize(b, w, h, &s));
            let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
            let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count();
            inter as f64 / union.max(1) as f64
        })
        .fold(1.0, f64::min)
}

fn dilate(ink: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = ink.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = ink[y * w + x]
                || (x > 0 && ink[y * w + x - 1])
                || (x + 1 < w && ink[y * w + x + 1])
                || (y > 0 && ink[(y - 1) * w + x])
                || (y + 1 < h && ink[(y + 1) * w + x]);
        }
    }
    out
}

/// Trims the right edge of horizontal runs at least three pixels long.
fn thin(ink: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = ink.to_vec();
    for y in 0..h {
        for x in 2..w {
            let i = y * w + x;
            let right_open = x + 1 == w || !ink[i + 1];
            if ink[i] && ink[i - 1] && ink[i - 2] && right_open {
                out[i] = false;
            }
        }
    }
    out
}

/// Right-pads `img` with background up to `max_width`.
pub fn pad_to_width(img: &GlyphImage, max_width: usize, block_width: usize) -> Result<GlyphImage> {
    if block_width == 0 || max_width % block_width != 0 {
        return Err(Error::GeometryMismatch(format!(
            "max width {max_width} is not a multiple of block width {block_width}"
        )));
    }
    if img.width > max_width {
        return Err(Error::TooWide {
            width: img.width,
            max: max_width,
        });
    }
    let mut out = GlyphImage::blank(img.height, max_width);
    for y in 0..img.height {
        out.pixels[y * max_width..y * max_width + img.width]
            .copy_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
    }
    out.valid_width = img.valid_width.min(img.width);
    Ok(out)
}

/// Number of pixel blocks touched by content of width `valid_width`.
pub fn valid_blocks(valid_width: usize, block_width: usize) -> usize {
    valid_width.div_ceil(block_width)
}
