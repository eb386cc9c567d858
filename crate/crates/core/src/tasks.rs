//! Synthetic sequence tasks and their metrics.
//!
//! Batches are time-major: `inputs[t]` is `batch × d_x`. Episodes shorter
//! than the batch are right-padded with zero inputs and masked out.
//!
//! Copy: `d_x = n_bits + 1`. Steps `0..L` carry the bits, step `L` sets the
//! delimiter channel `n_bits`, steps `L+1..=2L` are blank and scored
//! against the bits.
//!
//! Associative recall: `d_x = n_bits + 2`. Each item is announced by
//! channel `n_bits` followed by `item_len` bit rows; the query is bracketed
//! by channel `n_bits + 1` before and after; the next `item_len` blank
//! steps are scored against the item that followed the query.
//!
//! Strokes: `d_x = 15`, channels `[dx, dy, eos, eod | one-hot digit ×10 |
//! bos]`. After the last quadruple, a `bos` step starts `n_digits` scored
//! steps; each later step carries the previous digit (the true one under
//! teacher forcing, the model's guess when free running).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::model::Feedback;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// Independent bits; Bernoulli cross-entropy per bit.
    Bits,
    /// One class per step; categorical cross-entropy.
    Classes,
}

#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub task: String,
    pub kind: TargetKind,
    pub batch: usize,
    pub d_x: usize,
    pub d_out: usize,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    /// `mask[t][b]`: step `t` of episode `b` is scored.
    pub mask: Vec<Vec<bool>>,
    /// Unpadded length of each episode.
    pub lengths: Vec<usize>,
    /// Digit labels per episode (stroke task).
    pub labels: Vec<Vec<usize>>,
    pub feedback: Option<Feedback>,
}

impl TaskBatch {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn scored(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    fn empty(task: &str, kind: TargetKind, batch: usize, steps: usize, d_x: usize, d_out: usize) -> Self {
        TaskBatch {
            task: task.into(),
            kind,
            batch,
            d_x,
            d_out,
            inputs: vec![Tensor::zeros(&[batch, d_x]); steps],
            targets: vec![Tensor::zeros(&[batch, d_out]); steps],
            mask: vec![vec![false; batch]; steps],
            lengths: vec![0; batch],
            labels: vec![Vec::new(); batch],
            feedback: None,
        }
    }
}

/// Copy episodes with lengths uniform over `1..=max_len`.
pub fn gen_copy<R: Rng + ?Sized>(max_len: usize, n_bits: usize, batch: usize, rng: &mut R) -> Result<TaskBatch> {
    if max_len == 0 || n_bits == 0 || batch == 0 {
        return Err(Error::invalid("gen_copy", "max_len, n_bits and batch must be positive"));
    }
    let lengths: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=max_len)).collect();
    gen_copy_lengths(&lengths, n_bits, rng)
}

/// Copy episodes with the given per-episode lengths.
pub fn gen_copy_lengths<R: Rng + ?Sized>(lengths: &[usize], n_bits: usize, rng: &mut R) -> Result<TaskBatch> {
    let batch = lengths.len();
    if batch == 0 || n_bits == 0 || lengths.contains(&0) {
        return Err(Error::invalid("gen_copy", "lengths and n_bits must be positive"));
    }
    let longest = *lengths.iter().max().unwrap();
    let steps = 2 * longest + 1;
    let mut tb = TaskBatch::empty("copy", TargetKind::Bits, batch, steps, n_bits + 1, n_bits);
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            let bits: Vec<f64> = (0..n_bits).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
            tb.inputs[t].row_mut(b)[..n_bits].copy_from_slice(&bits);
            tb.targets[len + 1 + t].row_mut(b).copy_from_slice(&bits);
            tb.mask[len + 1 + t][b] = true;
        }
        tb.inputs[len].row_mut(b)[n_bits] = 1.0;
        tb.lengths[b] = 2 * len + 1;
    }
    Ok(tb)
}

pub fn gen_assoc_recall<R: Rng + ?Sized>(
    n_items: usize,
    item_len: usize,
    n_bits: usize,
    batch: usize,
    rng: &mut R,
) -> Result<TaskBatch> {
    if n_items < 2 {
        return Err(Error::invalid("gen_assoc_recall", format!("need at least 2 items, got {n_items}")));
    }
    if item_len == 0 || n_bits == 0 || batch == 0 {
        return Err(Error::invalid("gen_assoc_recall", "item_len, n_bits and batch must be positive"));
    }
    let steps = n_items * (item_len + 1) + 2 + 2 * item_len;
    let mut tb = TaskBatch::empty("recall", TargetKind::Bits, batch, steps, n_bits + 2, n_bits);
    for b in 0..batch {
        let items: Vec<Vec<Vec<f64>>> = (0..n_items)
            .map(|_| {
                (0..item_len)
                    .map(|_| (0..n_bits).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect())
                    .collect()
            })
            .collect();
        let mut t = 0;
        for item in &items {
            tb.inputs[t].row_mut(b)[n_bits] = 1.0;
            t += 1;
            for row in item {
                tb.inputs[t].row_mut(b)[..n_bits].copy_from_slice(row);
                t += 1;
            }
        }
        let q = rng.random_range(0..n_items - 1);
        tb.inputs[t].row_mut(b)[n_bits + 1] = 1.0;
        t += 1;
        for row in &items[q] {
            tb.inputs[t].row_mut(b)[..n_bits].copy_from_slice(row);
            t += 1;
        }
        tb.inputs[t].row_mut(b)[n_bits + 1] = 1.0;
        t += 1;
        for row in &items[q + 1] {
            tb.targets[t].row_mut(b).copy_from_slice(row);
            tb.mask[t][b] = true;
            t += 1;
        }
        tb.lengths[b] = steps;
        tb.labels[b] = vec![q];
    }
    Ok(tb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrokeQuadruple {
    pub dx: i8,
    pub dy: i8,
    pub eos: bool,
    pub eod: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub label: usize,
    pub quads: Vec<StrokeQuadruple>,
}

pub const STROKE_CHANNELS: usize = 4;
pub const N_DIGITS: usize = 10;
pub const STROKE_D_X: usize = STROKE_CHANNELS + N_DIGITS + 1;

/// Polyline skeletons, one list of strokes per digit, in grid units with
/// `y` pointing down.
const SKELETONS: [&[&[(i32, i32)]]; 10] = [
    &[&[(0, 0), (-5, 3), (-5, 12), (0, 16), (5, 12), (5, 3), (0, 0)]],
    &[&[(0, 0), (-3, 4), (3, -2), (3, 14), (0, 16), (6, 16)]],
    &[&[(0, 0), (4, -2), (8, 1), (8, 5), (0, 14), (9, 14)]],
    &[&[(0, 0), (4, -2), (8, 1), (4, 6), (8, 10), (4, 14), (0, 12)]],
    &[&[(0, 0), (-4, 10), (6, 10)], &[(3, 4), (3, 18)]],
    &[&[(0, 0), (-8, 0), (-8, 6), (-2, 6), (0, 10), (-3, 14), (-8, 13)]],
    &[&[(0, 0), (-6, 6), (-6, 12), (-2, 14), (2, 11), (-2, 8), (-6, 10)]],
    &[&[(0, 0), (10, 0), (4, 16)], &[(3, 8), (9, 8)]],
    &[&[(0, 0), (-4, 3), (4, 9), (0, 13), (-4, 9), (4, 3), (0, 0)]],
    &[&[(0, 0), (-4, 3), (0, 6), (4, 3), (0, 0), (4, 2), (4, 16)]],
];

fn skeleton(digit: usize) -> Vec<Vec<(i32, i32)>> {
    SKELETONS[digit]
        .iter()
        .map(|s| s.iter().map(|&(x, y)| (x * 6 / 5, y * 6 / 5)).collect())
        .collect()
}

fn sign(v: i32) -> i8 {
    v.signum() as i8
}

/// Rasterizes a segment into unit king moves.
fn segment(from: (i32, i32), to: (i32, i32), out: &mut Vec<(i8, i8)>) {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let n = dx.abs().max(dy.abs());
    let mut prev = from;
    for s in 1..=n {
        let frac = s as f64 / n as f64;
        let p = (
            from.0 + (dx as f64 * frac).round() as i32,
            from.1 + (dy as f64 * frac).round() as i32,
        );
        out.push((sign(p.0 - prev.0), sign(p.1 - prev.1)));
        prev = p;
    }
}

/// Unjittered quadruples for `digit`. The first quadruple is `(0, 0)`.
pub fn glyph_template(digit: usize) -> Glyph {
    let strokes = skeleton(digit);
    let mut quads = vec![StrokeQuadruple {
        dx: 0,
        dy: 0,
        eos: false,
        eod: false,
    }];
    let mut pos = strokes[0][0];
    for (si, stroke) in strokes.iter().enumerate() {
        if si > 0 {
            // pen-up travel to the next stroke, flagged as stroke ends
            let mut moves = Vec::new();
            segment(pos, stroke[0], &mut moves);
            quads.extend(moves.into_iter().map(|(dx, dy)| StrokeQuadruple {
                dx,
                dy,
                eos: true,
                eod: false,
            }));
            pos = stroke[0];
        }
        for w in stroke.windows(2) {
            let mut moves = Vec::new();
            segment(w[0], w[1], &mut moves);
            quads.extend(moves.into_iter().map(|(dx, dy)| StrokeQuadruple {
                dx,
                dy,
                eos: false,
                eod: false,
            }));
            pos = w[1];
        }
        quads.last_mut().unwrap().eos = true;
    }
    quads.last_mut().unwrap().eod = true;
    Glyph { label: digit, quads }
}

/// Deletes up to 10% of the plain interior quadruples, preserving order.
pub fn jitter_glyph<R: Rng + ?Sized>(glyph: &Glyph, rng: &mut R) -> Glyph {
    let n = glyph.quads.len();
    let candidates: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&i| !glyph.quads[i].eos && !glyph.quads[i].eod)
        .collect();
    let max_del = (n / 10).min(candidates.len());
    let n_del = rng.random_range(0..=max_del);
    let picked = rand::seq::index::sample(rng, candidates.len(), n_del);
    let mut drop = vec![false; n];
    for p in picked.iter() {
        drop[candidates[p]] = true;
    }
    Glyph {
        label: glyph.label,
        quads: glyph
            .quads
            .iter()
            .zip(&drop)
            .filter(|(_, &d)| !d)
            .map(|(q, _)| *q)
            .collect(),
    }
}

/// Where digits for stroke episodes come from.
#[derive(Clone, Debug)]
pub enum GlyphSource {
    /// The ten built-in templates with per-sample jitter.
    Synthetic,
    /// Glyphs read from a stroke file, drawn uniformly.
    Loaded(Vec<Glyph>),
}

impl GlyphSource {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Glyph> {
        match self {
            GlyphSource::Synthetic => {
                let d = rng.random_range(0..N_DIGITS);
                Ok(jitter_glyph(&glyph_template(d), rng))
            }
            GlyphSource::Loaded(gs) => {
                if gs.is_empty() {
                    return Err(Error::invalid("gen_stroke_digits", "no digits in source"));
                }
                Ok(gs[rng.random_range(0..gs.len())].clone())
            }
        }
    }
}

pub fn gen_stroke_digits<R: Rng + ?Sized>(
    n_digits: usize,
    source: &GlyphSource,
    batch: usize,
    rng: &mut R,
) -> Result<TaskBatch> {
    if n_digits == 0 || batch == 0 {
        return Err(Error::invalid("gen_stroke_digits", "n_digits and batch must be positive"));
    }
    let episodes: Vec<Vec<Glyph>> = (0..batch)
        .map(|_| (0..n_digits).map(|_| source.draw(rng)).collect())
        .collect::<Result<_>>()?;
    let stroke_lens: Vec<usize> = episodes
        .iter()
        .map(|e| e.iter().map(|g| g.quads.len()).sum())
        .collect();
    let steps = stroke_lens.iter().max().unwrap() + n_digits;
    let mut tb = TaskBatch::empty("stroke", TargetKind::Classes, batch, steps, STROKE_D_X, N_DIGITS);
    let mut fb = vec![vec![false; batch]; steps];
    for (b, ep) in episodes.iter().enumerate() {
        let mut t = 0;
        for q in ep.iter().flat_map(|g| &g.quads) {
            let row = tb.inputs[t].row_mut(b);
            row[0] = q.dx as f64;
            row[1] = q.dy as f64;
            row[2] = q.eos as u8 as f64;
            row[3] = q.eod as u8 as f64;
            t += 1;
        }
        tb.inputs[t].row_mut(b)[STROKE_D_X - 1] = 1.0;
        for (j, g) in ep.iter().enumerate() {
            if j > 0 {
                tb.inputs[t].row_mut(b)[STROKE_CHANNELS + ep[j - 1].label] = 1.0;
                fb[t][b] = true;
            }
            tb.targets[t].row_mut(b)[g.label] = 1.0;
            tb.mask[t][b] = true;
            t += 1;
        }
        tb.lengths[b] = t;
        tb.labels[b] = ep.iter().map(|g| g.label).collect();
    }
    tb.feedback = Some(Feedback {
        channel_offset: STROKE_CHANNELS,
        n_classes: N_DIGITS,
        steps: fb,
    });
    Ok(tb)
}

/// Reads a stroke file: blocks separated by blank lines, each a
/// `digit=<0-9>` header followed by `dx,dy,eos,eod` lines. Lines starting
/// with `#` are ignored.
pub fn load_stroke_file(path: &Path) -> Result<Vec<Glyph>> {
    let text = std::fs::read_to_string(path)?;
    parse_strokes(&text, &path.display().to_string())
}

pub fn parse_strokes(text: &str, origin: &str) -> Result<Vec<Glyph>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut glyphs = Vec::new();
    let mut current: Option<Glyph> = None;
    let flush = |cur: &mut Option<Glyph>, glyphs: &mut Vec<Glyph>, line: usize| -> Result<()> {
        if let Some(g) = cur.take() {
            if g.quads.is_empty() {
                return Err(err(line, format!("digit {} has no quadruples", g.label)));
            }
            if !g.quads.last().unwrap().eod {
                return Err(err(line, format!("digit {} does not end with eod = 1", g.label)));
            }
            glyphs.push(g);
        }
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            flush(&mut current, &mut glyphs, ln)?;
            continue;
        }
        if let Some(d) = line.strip_prefix("digit=") {
            flush(&mut current, &mut glyphs, ln)?;
            let label: usize = d.trim().parse().map_err(|_| err(ln, format!("bad digit label {d:?}")))?;
            if label >= N_DIGITS {
                return Err(err(ln, format!("digit label {label} out of range")));
            }
            current = Some(Glyph {
                label,
                quads: Vec::new(),
            });
            continue;
        }
        let g = current
            .as_mut()
            .ok_or_else(|| err(ln, "quadruple before any digit= header".into()))?;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(ln, format!("expected 4 fields, got {}", fields.len())));
        }
        let num = |s: &str| s.parse::<i64>().map_err(|_| err(ln, format!("not an integer: {s:?}")));
        let (dx, dy, eos, eod) = (num(fields[0])?, num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if !(-1..=1).contains(&dx) || !(-1..=1).contains(&dy) {
            return Err(err(ln, format!("offset ({dx},{dy}) outside {{-1,0,1}}")));
        }
        if !(0..=1).contains(&eos) || !(0..=1).contains(&eod) {
            return Err(err(ln, "eos/eod must be 0 or 1".into()));
        }
        if g.quads.last().is_some_and(|q| q.eod) {
            return Err(err(ln, "quadruple after eod = 1".into()));
        }
        g.quads.push(StrokeQuadruple {
            dx: dx as i8,
            dy: dy as i8,
            eos: eos == 1,
            eod: eod == 1,
        });
    }
    flush(&mut current, &mut glyphs, text.lines().count() + 1)?;
    Ok(glyphs)
}

pub fn format_strokes(glyphs: &[Glyph]) -> String {
    let mut s = String::new();
    for (i, g) in glyphs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "digit={}", g.label);
        for q in &g.quads {
            let _ = writeln!(s, "{},{},{},{}", q.dx, q.dy, q.eos as u8, q.eod as u8);
        }
    }
    s
}

/// Fraction of positions whose predicted class differs from the target.
pub fn per_digit_error(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::invalid(
            "per_digit_error",
            format!("{} predictions for {} targets", predictions.len(), targets.len()),
        ));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let wrong = predictions.iter().zip(targets).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / targets.len() as f64)
}

/// Argmax predictions and targets on the scored steps, episode-major.
pub fn scored_classes(batch: &TaskBatch, logits: &[Tensor]) -> (Vec<usize>, Vec<usize>) {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch.batch {
        for t in 0..batch.steps() {
            if batch.mask[t][b] {
                preds.push(argmax(logits[t].row(b)));
                targets.push(argmax(batch.targets[t].row(b)));
            }
        }
    }
    (preds, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn segments_are_unit_moves() {
        let mut m = Vec::new();
        segment((0, 0), (-5, 3), &mut m);
        assert_eq!(m.len(), 5);
        let (sx, sy) = m.iter().fold((0i32, 0i32), |a, &(x, y)| (a.0 + x as i32, a.1 + y as i32));
        assert_eq!((sx, sy), (-5, 3));
    }

    #[test]
    fn templates_close_at_endpoints() {
        for d in 0..10 {
            let g = glyph_template(d);
            let sk = skeleton(d);
            let last = sk.last().unwrap().last().unwrap();
            let first = sk[0][0];
            let (sx, sy) = g.quads.iter().fold((0i32, 0i32), |a, q| (a.0 + q.dx as i32, a.1 + q.dy as i32));
            assert_eq!((first.0 + sx, first.1 + sy), *last, "digit {d}");
        }
    }

    #[test]
    fn copy_with_fixed_lengths() {
        let tb = gen_copy_lengths(&[1, 3], 2, &mut SeedStream::new(1).rng()).unwrap();
        assert_eq!(tb.steps(), 7);
        assert_eq!(tb.lengths, vec![3, 7]);
        assert_eq!(tb.scored(), 4);
        assert!(tb.mask[2][0] && !tb.mask[3][0]);
    }
}
