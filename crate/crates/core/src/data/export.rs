use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{Expression, PlacedObject, SampleRecord};
use super::vocab::TokenSeq;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One line of `expressions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub id: usize,
    /// Unpadded token ids, global slot first.
    pub tokens: Vec<usize>,
    pub text: String,
    pub seed: u64,
    pub target: usize,
    pub objects: Vec<PlacedObject>,
    pub expression: Expression,
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[H, W, 3]` image in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::dim("write_ppm", format!("expected [H, W, 3], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Writes a binary `[H, W]` mask as PGM with values 0 and 255.
pub fn write_pgm(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let &[h, w] = mask.shape() else {
        return Err(Error::dim("write_pgm", format!("expected [H, W], got {:?}", mask.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM or PPM with maxval 255 and returns it scaled to
/// `[0, 1]`, shaped `[H, W]` or `[H, W, 3]`.
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut fields = Vec::with_capacity(4);
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-text header"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let n = w * h * channels;
    let body = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated pixel data"))?;
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    let shape: Vec<usize> = if channels == 1 { vec![h, w] } else { vec![h, w, 3] };
    Tensor::new(&shape, data)
}

/// Writes `images/NNN.ppm`, `masks/NNN.pgm` and `expressions.jsonl`.
pub fn save_dataset(dir: &Path, samples: &[SampleRecord]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut jsonl = fs::File::create(dir.join("expressions.jsonl"))?;
    for (id, s) in samples.iter().enumerate() {
        write_ppm(&dir.join(format!("images/{id:03}.ppm")), &s.image)?;
        write_pgm(&dir.join(format!("masks/{id:03}.pgm")), &s.gt_mask)?;
        let rec = ExpressionRecord {
            id,
            tokens: s.tokens.ids()[..s.tokens.len()].to_vec(),
            text: s.text(),
            seed: s.seed,
            target: s.target,
            objects: s.objects.clone(),
            expression: s.expression,
        };
        writeln!(jsonl, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

/// Inverse of [`save_dataset`]; tokens are padded to `max_len`.
pub fn load_dataset(dir: &Path, max_len: usize) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(dir.join("expressions.jsonl"))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExpressionRecord = serde_json::from_str(&line)?;
        let image = read_pnm(&dir.join(format!("images/{:03}.ppm", rec.id)))?;
        let gt_mask = read_pnm(&dir.join(format!("masks/{:03}.pgm", rec.id)))?;
        if image.rank() != 3 || gt_mask.rank() != 2 || image.shape()[..2] != gt_mask.shape()[..] {
            return Err(Error::Format(format!("sample {} has mismatched image and mask", rec.id)));
        }
        out.push(SampleRecord {
            image,
            tokens: TokenSeq::from_ids(rec.tokens, max_len)?,
            gt_mask,
            seed: rec.seed,
            objects: rec.objects,
            target: rec.target,
            expression: rec.expression,
        });
    }
    Ok(out)
}
