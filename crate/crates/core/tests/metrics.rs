use std::collections::HashSet;

use lapirn::diffeo::Transform;
use lapirn::metrics::{dice, evaluate, foreground_labels, topology_change, warp_labels, MetricsReport, SegPair};
use lapirn::{Field, LabelMap};
use proptest::prelude::*;

fn label_map(shape: &[usize], data: Vec<u16>) -> LabelMap {
    LabelMap::new(shape.to_vec(), data).unwrap()
}

fn blocks(n: usize) -> LabelMap {
    let rects: [(u16, [usize; 4]); 3] = [(1, [4, 20, 4, 20]), (2, [24, 44, 10, 30]), (3, [8, 30, 30, 50])];
    let mut data = vec![0u16; n * n];
    for (l, [y0, y1, x0, x1]) in rects {
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * n + x] = l;
            }
        }
    }
    label_map(&[1, n, n], data)
}

fn set_of(m: &LabelMap, l: u16) -> HashSet<usize> {
    m.data().iter().enumerate().filter(|(_, &x)| x == l).map(|(i, _)| i).collect()
}

fn labels_strategy(len: usize) -> impl Strategy<Value = Vec<u16>> {
    prop::collection::vec(0u16..5, len)
}

#[test]
fn dice_half_overlap_and_absent_labels() {
    let a = label_map(&[1, 2, 2], vec![1, 1, 0, 0]);
    let b = label_map(&[1, 2, 2], vec![1, 0, 1, 0]);
    let d = dice(&a, &b, &[1, 7]).unwrap();
    assert_eq!(d[&1], 0.5);
    assert_eq!(d[&7], 1.0);
    assert_eq!(foreground_labels(&a, &b), vec![1]);
}

#[test]
fn dice_rejects_mismatched_shapes() {
    let a = label_map(&[1, 2, 2], vec![0; 4]);
    let b = label_map(&[1, 4, 1], vec![0; 4]);
    assert!(dice(&a, &b, &[1]).is_err());
}

#[test]
fn identity_warp_keeps_labels() {
    let seg = blocks(64);
    let out = warp_labels(&seg, &Transform::identity(&[64, 64])).unwrap();
    assert_eq!(out, seg);
}

#[test]
fn integer_shift_moves_labels() {
    let n = 16;
    let seg = label_map(&[1, n, n], (0..n * n).map(|i| (i % 7) as u16).collect());
    let disp = Field::from_fn(&[2, n, n], |c, _| [2.0, -1.0][c]);
    let out = warp_labels(&seg, &Transform::displacement(disp).unwrap()).unwrap();
    for y in 0..n {
        for x in 0..n {
            let sy = (y + 2).min(n - 1);
            let sx = x.saturating_sub(1);
            assert_eq!(out.data()[y * n + x], seg.data()[sy * n + sx]);
        }
    }
}

#[test]
fn uniform_stretch_volume_ratio() {
    let n = 64;
    let seg = blocks(n);
    let disp = Field::from_fn(&[2, n, n], |c, p| 0.1 * p[c] as f32);
    let warped = warp_labels(&seg, &Transform::displacement(disp).unwrap()).unwrap();
    let tc = topology_change(&seg, &warped, &[1, 2, 3]).unwrap();
    let v = tc.value.unwrap();
    assert!((v - 1.21).abs() <= 0.05 * 1.21, "{v} {:?}", tc.per_label);
    assert!(tc.excluded.is_empty());
}

#[test]
fn identity_topology_change_and_exclusion() {
    let seg = blocks(64);
    let tc = topology_change(&seg, &seg, &[1, 2, 3, 9]).unwrap();
    assert_eq!(tc.value, Some(1.0));
    assert_eq!(tc.excluded, vec![9]);
    let none = topology_change(&seg, &seg, &[9]).unwrap();
    assert_eq!(none.value, None);
}

#[test]
fn report_csv_has_stable_columns() {
    let seg = blocks(64);
    let t = Transform::identity(&[64, 64]);
    let r = evaluate(&t, Some(SegPair { fixed: &seg, moving: &seg }), 1.5).unwrap();
    assert_eq!(r.dsc_mean, Some(1.0));
    assert_eq!(r.tc, Some(1.0));
    assert_eq!(r.pct_folding, 0.0);
    let labels: Vec<u16> = r.dsc.keys().copied().collect();
    let header = MetricsReport::csv_header(&labels);
    let row = r.csv_row("p", &labels);
    assert_eq!(header.split(',').count(), row.split(',').count());
    assert!(header.starts_with("pair_id,"), "{header}");
    let bare = evaluate(&t, None, 0.0).unwrap();
    assert!(bare.csv_row("p", &[]).contains(",,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_matches_set_oracle(a in labels_strategy(60), b in labels_strategy(60)) {
        let (ma, mb) = (label_map(&[1, 6, 10], a), label_map(&[1, 6, 10], b));
        let labels = [0u16, 1, 2, 3, 4];
        let d = dice(&ma, &mb, &labels).unwrap();
        let back = dice(&mb, &ma, &labels).unwrap();
        for l in labels {
            let (sa, sb) = (set_of(&ma, l), set_of(&mb, l));
            let want = if sa.is_empty() && sb.is_empty() {
                1.0
            } else {
                2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
            };
            prop_assert_eq!(d[&l], want);
            prop_assert_eq!(back[&l], d[&l]);
        }
    }

    #[test]
    fn disjoint_labels_score_zero(a in labels_strategy(40)) {
        let ma = label_map(&[1, 5, 8], a.iter().map(|&x| x + 1).collect());
        let mb = label_map(&[1, 5, 8], a.iter().map(|&x| x + 10).collect());
        for (_, d) in dice(&ma, &mb, &foreground_labels(&ma, &mb)).unwrap() {
            prop_assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn warped_labels_commute_with_relabeling(
        a in labels_strategy(144),
        amp in 0.0f32..3.0,
        fy in 0.1f32..0.8,
        fx in 0.1f32..0.8,
    ) {
        let seg = label_map(&[1, 12, 12], a);
        let disp = Field::from_fn(&[2, 12, 12], |c, p| amp * ((p[0] as f32 * fy + c as f32).sin() + (p[1] as f32 * fx).cos()));
        let t = Transform::displacement(disp).unwrap();
        let perm = [3u16, 0, 4, 1, 2];
        let relabel = |m: &LabelMap| label_map(m.shape(), m.data().iter().map(|&x| perm[x as usize]).collect());
        let warped = warp_labels(&seg, &t).unwrap();
        prop_assert_eq!(warp_labels(&relabel(&seg), &t).unwrap(), relabel(&warped));
        let src: HashSet<u16> = seg.labels().into_iter().collect();
        prop_assert!(warped.labels().iter().all(|l| src.contains(l)));
    }
}
