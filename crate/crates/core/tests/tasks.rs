use std::collections::HashSet;

use proptest::prelude::*;
use tardis::rng::SeedStream;
use tardis::tasks::*;

fn bits_of(t: &tardis::autodiff::Tensor, b: usize, n: usize) -> Vec<f64> {
    t.row(b)[..n].to_vec()
}

proptest! {
    #[test]
    fn copy_targets_mirror_inputs(seed in any::<u64>(), max_len in 1usize..12, n_bits in 1usize..9, batch in 1usize..6) {
        let tb = gen_copy(max_len, n_bits, batch, &mut SeedStream::new(seed).rng()).unwrap();
        prop_assert_eq!(tb.d_x, n_bits + 1);
        for b in 0..batch {
            let len = (tb.lengths[b] - 1) / 2;
            prop_assert!((1..=max_len).contains(&len));
            let delim: Vec<usize> = (0..tb.steps()).filter(|&t| tb.inputs[t].row(b)[n_bits] == 1.0).collect();
            prop_assert_eq!(delim, vec![len]);
            for t in 0..len {
                prop_assert_eq!(bits_of(&tb.inputs[t], b, n_bits), bits_of(&tb.targets[len + 1 + t], b, n_bits));
                prop_assert!(tb.mask[len + 1 + t][b]);
            }
            for t in 0..tb.steps() {
                let scored = t > len && t <= 2 * len;
                prop_assert_eq!(tb.mask[t][b], scored);
                if t > len {
                    prop_assert!(tb.inputs[t].row(b).iter().all(|&v| v == 0.0));
                }
                prop_assert!(tb.inputs[t].data().iter().chain(tb.targets[t].data()).all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn recall_target_follows_query(seed in any::<u64>(), n_items in 2usize..6, item_len in 1usize..4, n_bits in 1usize..6) {
        let tb = gen_assoc_recall(n_items, item_len, n_bits, 3, &mut SeedStream::new(seed).rng()).unwrap();
        for b in 0..3 {
            let q = tb.labels[b][0];
            prop_assert!(q < n_items - 1);
            let item = |i: usize| -> Vec<Vec<f64>> {
                (0..item_len).map(|j| bits_of(&tb.inputs[i * (item_len + 1) + 1 + j], b, n_bits)).collect()
            };
            let base = n_items * (item_len + 1);
            let query: Vec<Vec<f64>> = (0..item_len).map(|j| bits_of(&tb.inputs[base + 1 + j], b, n_bits)).collect();
            prop_assert_eq!(&query, &item(q));
            let out_start = base + 2 + item_len;
            let target: Vec<Vec<f64>> = (0..item_len).map(|j| bits_of(&tb.targets[out_start + j], b, n_bits)).collect();
            prop_assert_eq!(&target, &item(q + 1));
            prop_assert_eq!(tb.scored(), 3 * item_len);
        }
    }

    #[test]
    fn generators_are_deterministic(seed in any::<u64>()) {
        let a = gen_stroke_digits(3, &GlyphSource::Synthetic, 2, &mut SeedStream::new(seed).rng()).unwrap();
        let b = gen_stroke_digits(3, &GlyphSource::Synthetic, 2, &mut SeedStream::new(seed).rng()).unwrap();
        prop_assert_eq!(a.inputs, b.inputs);
        prop_assert_eq!(a.labels, b.labels);
        let c = gen_copy(5, 4, 3, &mut SeedStream::new(seed).rng()).unwrap();
        let d = gen_copy(5, 4, 3, &mut SeedStream::new(seed).rng()).unwrap();
        prop_assert_eq!(c.inputs, d.inputs);
    }
}

#[test]
fn one_bit_length_one_copy_has_two_episodes() {
    let mut seen = HashSet::new();
    let mut rng = SeedStream::new(0).rng();
    for _ in 0..200 {
        let tb = gen_copy(1, 1, 1, &mut rng).unwrap();
        seen.insert(tb.inputs[0].data()[0] as u8);
    }
    assert_eq!(seen.len(), 2);
}

#[test]
fn copy_lengths_are_uniform() {
    let tb = gen_copy(10, 1, 20_000, &mut SeedStream::new(2).rng()).unwrap();
    let mut counts = [0usize; 10];
    for &l in &tb.lengths {
        counts[(l - 1) / 2 - 1] += 1;
    }
    // chi-square with 9 degrees of freedom; 27.9 is the 0.001 quantile
    let chi: f64 = counts.iter().map(|&c| (c as f64 - 2000.0).powi(2) / 2000.0).sum();
    assert!(chi < 27.9, "{counts:?}");
}

#[test]
fn two_item_recall_always_queries_the_first() {
    let tb = gen_assoc_recall(2, 2, 3, 200, &mut SeedStream::new(0).rng()).unwrap();
    assert!(tb.labels.iter().all(|l| l == &vec![0]));
    assert!(gen_assoc_recall(1, 2, 3, 2, &mut SeedStream::new(0).rng()).is_err());
}

#[test]
fn recall_bits_are_balanced() {
    let tb = gen_assoc_recall(4, 3, 8, 1100, &mut SeedStream::new(5).rng()).unwrap();
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..tb.batch {
        for i in 0..4 {
            for j in 0..3 {
                sum += tb.inputs[i * 4 + 1 + j].row(b)[..8].iter().sum::<f64>();
                n += 8;
            }
        }
    }
    assert!(n >= 100_000);
    assert!((sum / n as f64 - 0.5).abs() < 0.01);
}

#[test]
fn glyph_templates_are_well_formed() {
    let mut total = 0;
    for d in 0..N_DIGITS {
        let g = glyph_template(d);
        assert_eq!(g.label, d);
        assert_eq!((g.quads[0].dx, g.quads[0].dy), (0, 0));
        assert!(g.quads.iter().all(|q| (-1..=1).contains(&q.dx) && (-1..=1).contains(&q.dy)));
        let eods: Vec<usize> = (0..g.quads.len()).filter(|&i| g.quads[i].eod).collect();
        assert_eq!(eods, vec![g.quads.len() - 1]);
        total += g.quads.len();
    }
    let mean = total as f64 / N_DIGITS as f64;
    assert!((30.0..=50.0).contains(&mean), "{mean}");
}

#[test]
fn jitter_deletes_at_most_a_tenth() {
    let mut rng = SeedStream::new(1).rng();
    for d in 0..N_DIGITS {
        let t = glyph_template(d);
        for _ in 0..50 {
            let j = jitter_glyph(&t, &mut rng);
            assert!(j.quads.len() >= t.quads.len() - t.quads.len() / 10);
            assert_eq!(j.quads[0], t.quads[0]);
            assert_eq!(j.quads.last(), t.quads.last());
            assert_eq!(j.quads.iter().filter(|q| q.eos).count(), t.quads.iter().filter(|q| q.eos).count());
        }
    }
}

#[test]
fn five_digit_episodes_are_about_two_hundred_steps() {
    let tb = gen_stroke_digits(5, &GlyphSource::Synthetic, 400, &mut SeedStream::new(3).rng()).unwrap();
    let mean = tb.lengths.iter().map(|&l| (l - 5) as f64).sum::<f64>() / 400.0;
    assert!((mean - 199.0).abs() <= 30.0, "{mean}");
}

#[test]
fn stroke_layout_and_labels() {
    let tb = gen_stroke_digits(3, &GlyphSource::Synthetic, 4, &mut SeedStream::new(9).rng()).unwrap();
    assert_eq!(tb.d_x, STROKE_CHANNELS + N_DIGITS + 1);
    let fb = tb.feedback.as_ref().unwrap();
    for b in 0..4 {
        let scored: Vec<usize> = (0..tb.steps()).filter(|&t| tb.mask[t][b]).collect();
        assert_eq!(scored.len(), 3);
        let bos = scored[0];
        assert_eq!(tb.inputs[bos].row(b)[STROKE_D_X - 1], 1.0);
        assert_eq!(tb.inputs[bos - 1].row(b)[3], 1.0);
        let decoded: Vec<usize> = scored
            .iter()
            .map(|&t| tardis::autodiff::argmax(tb.targets[t].row(b)))
            .collect();
        assert_eq!(decoded, tb.labels[b]);
        for (j, &t) in scored.iter().enumerate() {
            assert_eq!(fb.steps[t][b], j > 0);
            if j > 0 {
                let fed = &tb.inputs[t].row(b)[STROKE_CHANNELS..STROKE_CHANNELS + N_DIGITS];
                assert_eq!(tardis::autodiff::argmax(fed), tb.labels[b][j - 1]);
                assert_eq!(fed.iter().sum::<f64>(), 1.0);
            }
        }
        for t in 0..bos {
            assert!(tb.inputs[t].row(b)[STROKE_CHANNELS..].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn stroke_files_round_trip() {
    let mut rng = SeedStream::new(4).rng();
    let glyphs: Vec<Glyph> = (0..N_DIGITS).map(|d| jitter_glyph(&glyph_template(d), &mut rng)).collect();
    let text = format_strokes(&glyphs);
    assert_eq!(parse_strokes(&text, "mem").unwrap(), glyphs);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.strokes");
    std::fs::write(&p, &text).unwrap();
    assert_eq!(load_stroke_file(&p).unwrap(), glyphs);
    let a = gen_stroke_digits(2, &GlyphSource::Loaded(glyphs.clone()), 3, &mut SeedStream::new(1).rng()).unwrap();
    assert_eq!(a.labels.len(), 3);
}

#[test]
fn three_line_digit_parses() {
    let g = parse_strokes("# comment\ndigit=7\n0,0,0,0\n1,-1,0,0\n1,0,1,1\n", "t").unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g[0].label, 7);
    assert_eq!(g[0].quads.len(), 3);
    assert!(g[0].quads[2].eod);
}

#[test]
fn empty_source_is_rejected_on_use() {
    let g = parse_strokes("", "t").unwrap();
    assert!(g.is_empty());
    let err = gen_stroke_digits(1, &GlyphSource::Loaded(g), 1, &mut SeedStream::new(0).rng()).unwrap_err();
    assert!(err.to_string().contains("no digits"));
}

#[test]
fn malformed_lines_name_their_line() {
    for (text, line) in [
        ("digit=1\n0,0,0,0\n2,0,0,1\n", 3),
        ("digit=1\n0,0,0\n", 2),
        ("0,0,0,1\n", 1),
        ("digit=1\n0,0,0,1\n\ndigit=x\n", 4),
        ("digit=12\n", 1),
        ("digit=1\n0,0,5,0\n", 2),
        ("digit=1\n0,0,0,1\n1,0,0,1\n", 3),
        ("digit=1\n0,0,0,0\n1,0,0,0\n\ndigit=2\n", 4),
    ] {
        let e = parse_strokes(text, "f.strokes").unwrap_err().to_string();
        assert!(e.starts_with(&format!("f.strokes:{line}:")), "{text:?} -> {e}");
    }
}

#[test]
fn per_digit_error_examples() {
    let t: Vec<usize> = (0..10).collect();
    assert_eq!(per_digit_error(&t, &t).unwrap(), 0.0);
    let wrong: Vec<usize> = t.iter().map(|d| (d + 1) % 10).collect();
    assert_eq!(per_digit_error(&wrong, &t).unwrap(), 1.0);
    let half: Vec<usize> = t.iter().map(|&d| if d < 5 { d } else { (d + 1) % 10 }).collect();
    assert_eq!(per_digit_error(&half, &t).unwrap(), 0.5);
    assert!(per_digit_error(&[1], &[1, 2]).is_err());
}
