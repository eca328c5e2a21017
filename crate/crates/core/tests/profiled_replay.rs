use bitrobust_core::biterror::{cell_index, inject_profiled, ProfiledMap};
use bitrobust_core::fixedpoint::{fit_and_quantize, QuantizedTensor};
use bitrobust_core::rng::{splitmix_at, unit_f64};
use bitrobust_core::QuantScheme;

fn tensor(w: usize, m: u8) -> QuantizedTensor {
    let weights: Vec<f64> = (0..w as u64).map(|i| 2.0 * unit_f64(splitmix_at(4, i)) - 1.0).collect();
    fit_and_quantize(&weights, &[0..w], &QuantScheme::rquant(m).unwrap()).unwrap()
}

#[test]
fn zero_map_changes_nothing() {
    let q = tensor(5000, 8);
    let map = ProfiledMap::zeros(32, 64).unwrap();
    for offset in [0, 1, 1000, 2047] {
        assert_eq!(inject_profiled(&q, &map, offset, 9).unwrap(), q);
    }
}

#[test]
fn single_deterministic_cell() {
    let (rows, cols) = (16, 16);
    let k = 37;
    let mut map = ProfiledMap::zeros(rows, cols).unwrap();
    map.set_cell(k, 1.0, 1.0).unwrap();
    let q = tensor(300, 8);
    let offset = 5;
    let out = inject_profiled(&q, &map, offset, 1).unwrap();
    let cells = rows * cols;
    for i in 0..q.len() {
        let mut want = 0u8;
        for j in 0..8u8 {
            if cell_index(offset, i, 8, j, cells) == k {
                want |= 1 << j;
            }
        }
        assert_eq!(q.codes()[i] ^ out.codes()[i], want, "weight {i}");
    }
    // (5 + 8 i + j) = 37 + 256 t: hits for i = 4 (j = 0), 36, 68, ...
    let hit: Vec<usize> = (0..q.len()).filter(|&i| q.codes()[i] != out.codes()[i]).collect();
    assert_eq!(hit, vec![4, 36, 68, 100, 132, 164, 196, 228, 260, 292]);
}

#[test]
fn one_directional_cell_only_flips_matching_values() {
    let mut map = ProfiledMap::zeros(4, 8).unwrap();
    // Every cell flips stored ones to zero, never zeros to one.
    for k in 0..32 {
        map.set_cell(k, 0.0, 1.0).unwrap();
    }
    let q = tensor(100, 8);
    let out = inject_profiled(&q, &map, 0, 3).unwrap();
    assert!(out.codes().iter().all(|&c| c == 0));
    for k in 0..32 {
        map.set_cell(k, 1.0, 0.0).unwrap();
    }
    let out = inject_profiled(&q, &map, 0, 3).unwrap();
    assert!(out.codes().iter().all(|&c| c == 0xff));
}

#[test]
fn faulty_column_hits_predicted_weights() {
    // A 64 x 128 array whose column 3 always fails. A row holds 16 weights,
    // so only the weight starting at a row boundary keeps bit 3 there.
    let (rows, cols) = (64, 128);
    let mut map = ProfiledMap::zeros(rows, cols).unwrap();
    for r in 0..rows {
        map.set_cell(r * cols + 3, 1.0, 1.0).unwrap();
    }
    let q = tensor(4000, 8);
    for offset in [0, 8, 1024, 8184] {
        let out = inject_profiled(&q, &map, offset, 17).unwrap();
        for (i, (a, b)) in q.codes().iter().zip(out.codes()).enumerate() {
            let want = if (offset + 8 * i) % cols == 0 { 1 << 3 } else { 0 };
            assert_eq!(a ^ b, want, "offset {offset} weight {i}");
        }
    }
}

#[test]
fn periodic_faulty_columns_flip_one_bit_position() {
    // Every eighth column fails, as a shared faulty sense amplifier would.
    let (rows, cols) = (64, 128);
    let mut map = ProfiledMap::zeros(rows, cols).unwrap();
    for r in 0..rows {
        for c in (3..cols).step_by(8) {
            map.set_cell(r * cols + c, 1.0, 1.0).unwrap();
        }
    }
    let q = tensor(4000, 8);
    for offset in [0, 8, 1024, 8184] {
        let out = inject_profiled(&q, &map, offset, 17).unwrap();
        for (a, b) in q.codes().iter().zip(out.codes()) {
            assert_eq!(a ^ b, 1 << 3, "offset {offset}");
        }
    }
    // Shifting by one cell moves the failing bit to position 2.
    let out = inject_profiled(&q, &map, 1, 17).unwrap();
    for (a, b) in q.codes().iter().zip(out.codes()) {
        assert_eq!(a ^ b, 1 << 2);
    }
}

#[test]
fn biased_column_matches_rate() {
    let (rows, cols) = (256, 128);
    let mut map = ProfiledMap::zeros(rows, cols).unwrap();
    for r in 0..rows {
        map.set_cell(r * cols + 5, 0.3, 0.3).unwrap();
    }
    let q = tensor(rows * cols / 8, 8);
    let out = inject_profiled(&q, &map, 0, 99).unwrap();
    let flips: u32 = q
        .codes()
        .iter()
        .zip(out.codes())
        .map(|(a, b)| (a ^ b).count_ones())
        .sum();
    let n = rows as f64;
    let sigma = (0.3 * 0.7 * n).sqrt();
    assert!((flips as f64 - 0.3 * n).abs() < 4.0 * sigma, "{flips}");
    // The same seed replays the same instance.
    assert_eq!(inject_profiled(&q, &map, 0, 99).unwrap(), out);
}

#[test]
fn offsets_wrap_around_the_array() {
    let mut map = ProfiledMap::zeros(2, 8).unwrap();
    map.set_cell(0, 1.0, 1.0).unwrap();
    let q = tensor(4, 8);
    // With offset 7, weights 1 and 3 start at cell 15 and wrap to cell 0
    // at bit 1.
    let out = inject_profiled(&q, &map, 7, 0).unwrap();
    let diff: Vec<u8> = q.codes().iter().zip(out.codes()).map(|(a, b)| a ^ b).collect();
    assert_eq!(diff, vec![0, 0b10, 0, 0b10]);
    assert!(inject_profiled(&q, &map, 16, 0).is_err());
}

#[test]
fn map_file_round_trip() {
    let mut map = ProfiledMap::zeros(3, 2).unwrap();
    map.set_cell(4, 0.25, 0.125).unwrap();
    let text = map.to_text();
    let back = ProfiledMap::parse(std::io::Cursor::new(format!("# measured\n\n{text}")), map.label()).unwrap();
    assert_eq!(back, map);
}

#[test]
fn offset_order_does_not_change_the_mean() {
    use bitrobust_core::evalharness::profiled_rte;
    use bitrobust_core::ndarray::Array2;
    use bitrobust_core::{Architecture, Dataset, Model};

    let arch = Architecture::new(vec![9, 6, 3]).unwrap();
    let model = Model::init(arch.clone(), 2);
    let n = 150;
    let x = Array2::from_shape_vec(
        (n, 9),
        (0..(n * 9) as u64).map(|i| unit_f64(splitmix_at(6, i))).collect(),
    )
    .unwrap();
    let y = (0..n as u64).map(|i| (splitmix_at(7, i) % 3) as u8).collect();
    let data = Dataset::new(x, y, 3, 3).unwrap();
    let q = fit_and_quantize(model.params(), &arch.groups(), &QuantScheme::rquant(8).unwrap()).unwrap();
    let mut map = ProfiledMap::zeros(8, 8).unwrap();
    for k in 0..64 {
        map.set_cell(k, 0.03 * (k % 4) as f64, 0.02 * (k % 5) as f64).unwrap();
    }
    let a = profiled_rte(&arch, &q, &data, &map, &[0, 9, 33], 5).unwrap();
    let b = profiled_rte(&arch, &q, &data, &map, &[33, 0, 9], 5).unwrap();
    assert_eq!((a.mean, a.std), (b.mean, b.std));
    assert_eq!(a.per_offset.len(), 3);
}
