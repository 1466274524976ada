use ndarray::Array2;
use painter_core::losses::{actual_token_indices, atal_loss, atal_loss_with, diffusion_loss, total_loss, Reduction, TokenIndexSet, TokenizedPrompt};
use painter_core::maskgen::resize_mask;
use painter_core::raster::BinaryMask;
use painter_core::text::{Tokenizer, EOT, PAD, SOT};
use painter_core::PainterError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stochastic(rng: &mut ChaCha8Rng, hw: usize, l: usize) -> Array2<f64> {
    let raw = Array2::from_shape_simple_fn((hw, l), || rng.random_range(0.0..1.0) + 1e-3);
    let sums = raw.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    raw / sums
}

#[test]
fn diffusion_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Array2::from_shape_simple_fn((4, 37), || rng.random_range(-3.0..3.0));
    let b = Array2::from_shape_simple_fn((4, 37), || rng.random_range(-3.0..3.0));
    let mut acc = 0.0;
    for i in 0..4 {
        for j in 0..37 {
            acc += (a[[i, j]] - b[[i, j]]) * (a[[i, j]] - b[[i, j]]);
        }
    }
    assert!((diffusion_loss(&a, &b).unwrap() - acc / 148.0).abs() < 1e-12);
    assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
    assert_eq!(diffusion_loss(&a, &(&a + 1.0)).unwrap(), 1.0);
    assert!(matches!(diffusion_loss(&a, &Array2::zeros((4, 36))), Err(PainterError::Shape(_))));
}

#[test]
fn actual_tokens_follow_the_tokenizer() {
    let tok = Tokenizer::new(77, 49408);
    let p = tok.encode("a parrot");
    assert_eq!(p.actual_len(), 4);
    assert_eq!(p.ids()[0], SOT);
    assert_eq!(p.ids()[3], EOT);
    assert!(p.ids()[4..].iter().all(|&id| id == PAD));
    assert_eq!(actual_token_indices(&p).unwrap().indices(), &[1, 2]);
    assert!(matches!(actual_token_indices(&tok.encode("  ")), Err(PainterError::EmptyPrompt)));

    let hand = TokenizedPrompt::new(vec![SOT, 9, 10, EOT, PAD], 4).unwrap();
    assert_eq!(actual_token_indices(&hand).unwrap().indices(), &[1, 2]);
    let long = tok.encode(&"word ".repeat(200));
    assert_eq!(long.actual_len(), 77);
    let s = actual_token_indices(&long).unwrap();
    assert_eq!(s.indices().first(), Some(&1));
    assert_eq!(s.indices().last(), Some(&75));
}

#[test]
fn atal_is_symmetric_in_layer_order_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = BinaryMask::from_fn(16, 16, |y, x| y < 9 && x > 3).unwrap();
    let maps = vec![stochastic(&mut rng, 64, 6), stochastic(&mut rng, 16, 6), stochastic(&mut rng, 4, 6)];
    let s = TokenIndexSet::new(vec![1, 2, 3]).unwrap();
    let v = atal_loss(&maps, &s, &m).unwrap();
    let mut rev = maps.clone();
    rev.reverse();
    assert!((atal_loss(&rev, &s, &m).unwrap() - v).abs() < 1e-15);
    assert!((0.0..=1.0).contains(&v));

    // sum mode scales each layer by its pixel count
    let single = vec![maps[0].clone()];
    let mean = atal_loss_with(&single, &s, &m, Reduction::Mean).unwrap();
    let sum = atal_loss_with(&single, &s, &m, Reduction::Sum).unwrap();
    assert!((sum - 64.0 * mean).abs() < 1e-12);
}

#[test]
fn atal_matches_independent_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = BinaryMask::from_fn(12, 24, |y, x| (y + 2 * x) % 7 < 3).unwrap();
    let maps = vec![stochastic(&mut rng, 18, 5), stochastic(&mut rng, 72, 5)];
    let s = [1usize, 3];
    let mut total = 0.0;
    for (a, (h, w)) in maps.iter().zip([(3usize, 6usize), (6, 12)]) {
        let mi = resize_mask(&m, h, w).unwrap();
        let mut sq = 0.0;
        for p in 0..h * w {
            let avg = (a[[p, s[0]]] + a[[p, s[1]]]) / 2.0;
            let d = avg - mi.0[[p / w, p % w]];
            sq += d * d;
        }
        total += sq / (h * w) as f64;
    }
    let v = atal_loss(&maps, &TokenIndexSet::new(s.to_vec()).unwrap(), &m).unwrap();
    assert!((v - total / 2.0).abs() < 1e-14);
}

#[test]
fn atal_rejects_bad_inputs() {
    let m = BinaryMask::ones(4, 4).unwrap();
    let a = Array2::from_elem((16, 3), 1.0 / 3.0);
    assert!(matches!(TokenIndexSet::new(vec![]), Err(PainterError::EmptyPrompt)));
    assert!(TokenIndexSet::new(vec![2, 1]).is_err());
    assert!(matches!(atal_loss(&[a.clone()], &TokenIndexSet::new(vec![5]).unwrap(), &m), Err(PainterError::Shape(_))));
    assert!(matches!(atal_loss(&[Array2::zeros((7, 3))], &TokenIndexSet::new(vec![1]).unwrap(), &m), Err(PainterError::Shape(_))));
    assert!(matches!(atal_loss(&[], &TokenIndexSet::new(vec![1]).unwrap(), &m), Err(PainterError::Shape(_))));
}

#[test]
fn total_loss_is_monotone() {
    assert_eq!(total_loss(0.7, 3.0, 0.0).unwrap().total, 0.7);
    let base = total_loss(1.0, 1.0, 1e-5).unwrap().total;
    assert!(total_loss(1.0 + 1e-9, 1.0, 1e-5).unwrap().total > base);
    assert!(total_loss(1.0, 1.5, 1e-5).unwrap().total > base);
    assert!(total_loss(1.0, 1.0, -1e-5).is_err());
}
