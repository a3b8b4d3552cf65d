//! Grayscale image grids, binary PGM I/O, and the patch-based image
//! tokenizer that turns each image into one visual token embedding.

use std::path::Path;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{EncoderBlock, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tape::{AttnMask, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Largest image accepted from disk, in pixels.
pub const MAX_PGM_PIXELS: usize = 1 << 22;

/// Pixels in `[0, 1]`, stored row-major as `height × width × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(shape_err!(
                "image dimensions {height}x{width}x{channels} must be positive"
            ));
        }
        if pixels.len() != height * width * channels {
            return Err(shape_err!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            ));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Binary PGM (P5, maxval 255). Single-channel only.
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        if self.channels != 1 {
            return Err(Error::Contract("PGM holds single-channel images only".into()));
        }
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        Ok(out)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut cur = PgmCursor { bytes, pos: 0 };
        if cur.bytes.get(..2) != Some(b"P5") {
            return Err(Error::Parse("PGM must start with P5".into()));
        }
        cur.pos = 2;
        let width = cur.header_number()?;
        let height = cur.header_number()?;
        let maxval = cur.header_number()?;
        if maxval != 255 {
            return Err(Error::Parse(format!("PGM maxval {maxval} is not 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        match cur.bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::Parse("PGM header not terminated by whitespace".into())),
        }
        if width == 0 || height == 0 {
            return Err(Error::Parse("PGM dimensions must be positive".into()));
        }
        let n = width
            .checked_mul(height)
            .filter(|&n| n <= MAX_PGM_PIXELS)
            .ok_or_else(|| Error::Parse(format!("PGM of {width}x{height} is too large")))?;
        let raster = cur
            .bytes
            .get(cur.pos..cur.pos + n)
            .ok_or_else(|| Error::Parse(format!("PGM raster truncated: need {n} bytes")))?;
        let pixels = raster.iter().map(|&b| b as f32 / 255.0).collect();
        ImageGrid::new(height, width, 1, pixels)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingImage {
                    path: path.to_path_buf(),
                }
            } else {
                Error::io(format!("reading {}", path.display()), e)
            }
        })?;
        Self::from_pgm(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PgmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn header_number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(Error::Parse("malformed PGM header number".into()));
        }
        let digits = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(digits.parse().expect("at most nine digits"))
    }
}

/// Splits an image into `N = HW/P²` patches ordered row-major over the
/// patch grid; each row is the row-major flattening of one patch.
pub fn patchify(img: &ImageGrid, patch: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = (img.height, img.width, img.channels);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * c;
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let y = pr * patch + r;
                let x0 = pc * patch;
                data.extend_from_slice(&img.pixels[(y * w + x0) * c..(y * w + x0 + patch) * c]);
            }
        }
    }
    Tensor::new([gh * gw, row_len], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor<f32>,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<ImageGrid> {
    let (n, row_len) = patches.dims2()?;
    if patch == 0
        || !height.is_multiple_of(patch)
        || !width.is_multiple_of(patch)
        || n != (height / patch) * (width / patch)
        || row_len != patch * patch * channels
    {
        return Err(shape_err!(
            "patches {:?} do not tile a {height}x{width}x{channels} image",
            patches.shape()
        ));
    }
    let gw = width / patch;
    let mut pixels = vec![0.0; height * width * channels];
    for (i, row) in patches.data().chunks(row_len).enumerate() {
        let (pr, pc) = (i / gw, i % gw);
        for r in 0..patch {
            let y = pr * patch + r;
            let dst = (y * width + pc * patch) * channels;
            pixels[dst..dst + patch * channels].copy_from_slice(&row[r * patch * channels..(r + 1) * patch * channels]);
        }
    }
    ImageGrid::new(height, width, channels, pixels)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl TokenizerConfig {
    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Linear patch projection, learnable class token and positions, `layers`
/// transformer blocks, then global max-pooling.
#[derive(Clone, Debug)]
pub struct ImageTokenizer {
    pub config: TokenizerConfig,
    pub projection: Linear,
    pub class_token: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl ImageTokenizer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        config: TokenizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let projection = Linear::new(store, &format!("{name}.projection"), config.patch_len(), d, false, rng)?;
        let class_token = store.add_normal(format!("{name}.class_token"), &[1, d], rng)?;
        let positions = store.add_normal(format!("{name}.positions"), &[config.n_patches() + 1, d], rng)?;
        let blocks = (0..config.layers)
            .map(|l| EncoderBlock::new(store, &format!("{name}.block{l}"), d, config.heads, rng))
            .collect::<Result<_>>()?;
        Ok(ImageTokenizer {
            config,
            projection,
            class_token,
            positions,
            blocks,
        })
    }

    /// One visual token per image: `[M, D]` for `M ≥ 1` patch sets.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, patches: &[Tensor<S>]) -> Result<Var> {
        if patches.is_empty() {
            return Err(Error::Contract("image tokenizer needs at least one image".into()));
        }
        let proj = tape.param(store, self.projection.weight);
        let class = tape.param(store, self.class_token);
        let pos = tape.param(store, self.positions);
        let mut pooled = Vec::with_capacity(patches.len());
        for p in patches {
            let p = tape.constant(p);
            let z0 = embed_patches(tape, p, proj, class, pos)?;
            let v = encode_and_pool(tape, store, z0, &self.blocks)?;
            pooled.push(tape.reshape(v, vec![1, self.config.dim])?);
        }
        tape.concat_rows(&pooled)
    }
}

/// `Z₀ = [class; patches · E] + E_pos`, class token at row 0.
pub fn embed_patches<S: Scalar>(
    tape: &mut Tape<S>,
    patches: Var,
    projection: Var,
    class_token: Var,
    positions: Var,
) -> Result<Var> {
    let n = tape.rows(patches);
    if tape.rows(positions) != n + 1 {
        return Err(shape_err!(
            "{} position rows for {n} patches plus the class token",
            tape.rows(positions)
        ));
    }
    let e = tape.matmul(patches, projection)?;
    let z = tape.concat_rows(&[class_token, e])?;
    tape.add(z, positions)
}

/// Runs the blocks over `Z₀` and max-pools every output row, class token
/// included, into one `[D]` vector.
pub fn encode_and_pool<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    z0: Var,
    blocks: &[EncoderBlock],
) -> Result<Var> {
    let mut z = z0;
    for block in blocks {
        z = block.forward(tape, store, z, &AttnMask::none())?.0;
    }
    tape.max_rows(z)
}
