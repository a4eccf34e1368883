use std::f64::consts::PI;

use lidarpan::io::{LabelSet, PanopticMap, PointCloud};
use lidarpan::projection::{
    backproject_knn, column_index, project, resize_for_network, unfold_rows, BackprojectConfig,
    ProjectionConfig,
};
use lidarpan::synth::{
    column_center, point_at, ring_columns, row_elevation, synthetic_cloud, CloudSpec,
};
use lidarpan::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ring_point(yaw_deg: f64, range: f64) -> [f32; 4] {
    point_at(range, yaw_deg.to_radians(), 0.0, 0.5)
}

#[test]
fn two_rings_across_the_wrap() {
    let yaws: Vec<f64> = (0..8).map(|i| 10.0 + 340.0 * i as f64 / 7.0).collect();
    let points: Vec<_> = yaws
        .iter()
        .chain(&yaws)
        .map(|&y| ring_point(y, 10.0))
        .collect();
    let rows = unfold_rows(&PointCloud::new(points), 310.0, None).unwrap();
    let expected: Vec<usize> = [0; 8].into_iter().chain([1; 8]).collect();
    assert_eq!(rows, expected);
}

#[test]
fn jump_from_359_5_to_0_5_starts_a_row() {
    let cloud = PointCloud::new(vec![ring_point(359.5, 5.0), ring_point(0.5, 5.0)]);
    assert_eq!(unfold_rows(&cloud, 310.0, None).unwrap(), vec![0, 1]);
}

#[test]
fn single_ring_stays_on_row_zero() {
    let points = (0..20)
        .map(|i| ring_point(5.0 + 17.0 * i as f64, 8.0))
        .collect();
    assert!(unfold_rows(&PointCloud::new(points), 310.0, None)
        .unwrap()
        .iter()
        .all(|&r| r == 0));
}

#[test]
fn too_many_rows_names_the_point() {
    let points = [350.0, 10.0, 350.0, 10.0]
        .iter()
        .map(|&y| ring_point(y, 5.0))
        .collect();
    match unfold_rows(&PointCloud::new(points), 310.0, Some(2)) {
        Err(Error::TooManyRows { point, .. }) => assert_eq!(point, 2),
        other => panic!("expected TooManyRows, got {other:?}"),
    }
}

#[test]
fn nearest_point_wins_a_collision() {
    let cfg = ProjectionConfig {
        width: 16,
        rows: Some(1),
        ..ProjectionConfig::default()
    };
    let cloud = PointCloud::new(vec![ring_point(40.0, 9.0), ring_point(40.0, 5.0)]);
    let labels = LabelSet::new(vec![1, 2], vec![0, 0]).unwrap();
    let p = project(&cloud, Some(&labels), &cfg).unwrap();
    let img = &p.image;
    let (r, c) = img.pixel_of_point[0].unwrap();
    assert_eq!(img.pixel_of_point[1], Some((r, c)));
    assert!((img.range_at(r, c) - 5.0).abs() < 1e-5);
    assert_eq!(img.point_of_pixel[r * 16 + c], Some(1));
    assert_eq!(p.labels.unwrap().at(r, c), (2, 0));
}

#[test]
fn collided_points_share_the_pixel_label_at_k1() {
    let cfg = ProjectionConfig {
        width: 16,
        rows: Some(1),
        ..ProjectionConfig::default()
    };
    let cloud = PointCloud::new(vec![ring_point(40.0, 9.0), ring_point(40.0, 5.0)]);
    let p = project(&cloud, None, &cfg).unwrap();
    let mut pred = PanopticMap::filled(1, 16, 0);
    let (r, c) = p.image.pixel_of_point[0].unwrap();
    pred.semantic[r * 16 + c] = 3;
    pred.instance[r * 16 + c] = 7;
    let bp = BackprojectConfig {
        k: 1,
        window: (1, 1),
        ignore_id: 0,
    };
    let out = backproject_knn(&pred, &p.image, &cloud, &bp).unwrap();
    assert_eq!(out.semantic, vec![3, 3]);
    assert_eq!(out.instance, vec![7, 7]);
}

#[test]
fn range_channel_reproduces_point_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = CloudSpec {
        rows: 8,
        width: 128,
        ..CloudSpec::default()
    };
    let s = synthetic_cloud(&mut rng, &spec);
    let cfg = ProjectionConfig {
        width: 128,
        rows: Some(8),
        ..ProjectionConfig::default()
    };
    let img = project(&s.cloud, None, &cfg).unwrap().image;
    for (i, p) in s.cloud.points.iter().enumerate() {
        let (r, c) = img.pixel_of_point[i].unwrap();
        let oracle =
            ((p[0] as f64).powi(2) + (p[1] as f64).powi(2) + (p[2] as f64).powi(2)).sqrt() as f32;
        assert_eq!(img.range_at(r, c), oracle);
        let n = 128 * 8;
        assert_eq!(img.channels.data()[n + r * 128 + c], p[3]);
        assert_eq!(img.channels.data()[2 * n + r * 128 + c], p[0]);
    }
}

#[test]
fn invalid_pixels_are_zero() {
    let cfg = ProjectionConfig {
        width: 32,
        rows: Some(2),
        ..ProjectionConfig::default()
    };
    let cloud = PointCloud::new(vec![ring_point(90.0, 7.0)]);
    let img = project(&cloud, None, &cfg).unwrap().image;
    assert_eq!(img.num_valid(), 1);
    for (p, &v) in img.valid.iter().enumerate() {
        if !v {
            for ch in 0..5 {
                assert_eq!(img.channels.data()[ch * 64 + p], 0.0);
            }
        }
    }
}

#[test]
fn non_finite_points_are_rejected() {
    let cloud = PointCloud::new(vec![[f32::NAN, 1.0, 0.0, 0.0]]);
    assert!(matches!(
        project(&cloud, None, &ProjectionConfig::default()),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn upsize_then_downsize_keeps_piecewise_constant_labels() {
    let (h, w) = (64, 2048);
    let mut labels = PanopticMap::filled(h, w, 0);
    for r in 0..h {
        for c in 0..w {
            labels.semantic[r * w + c] = 1 + (c / 64) as u32 % 5;
            labels.instance[r * w + c] = (r / 16) as u32;
        }
    }
    let points: Vec<[f32; 4]> = (0..h)
        .flat_map(|r| {
            ring_columns(w)
                .into_iter()
                .map(move |c| point_at(10.0, column_center(c, w), row_elevation(r, h), 0.1))
        })
        .collect();
    let cloud = PointCloud::new(points);
    let cfg = ProjectionConfig {
        width: w,
        rows: Some(h),
        yaw_jump_threshold_deg: 310.0,
    };
    let mut img = project(&cloud, None, &cfg).unwrap().image;
    img.valid.iter_mut().for_each(|v| *v = true);
    let (big, big_labels) = resize_for_network(&img, Some(&labels), 256, 4096).unwrap();
    let (_, back) = resize_for_network(&big, big_labels.as_ref(), h, w).unwrap();
    let back = back.unwrap();
    let agree = back
        .semantic
        .iter()
        .zip(&labels.semantic)
        .filter(|(a, b)| a == b)
        .count();
    assert_eq!(agree, h * w);
    assert_eq!(back.instance, labels.instance);
}

proptest! {
    #[test]
    fn column_index_is_monotone_and_in_range(a in -PI..PI, b in -PI..PI, w in 1usize..4096) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (cl, ch) = (column_index(lo, w), column_index(hi, w));
        prop_assert!(cl < w && ch < w);
        prop_assert!(ch <= cl);
        let oracle = ((0.5 * (1.0 - lo / PI) * w as f64).floor() as i64).clamp(0, w as i64 - 1) as usize;
        prop_assert_eq!(cl, oracle);
    }

    #[test]
    fn unfolded_rows_are_monotone(yaws in prop::collection::vec(0.0f64..360.0, 1..200)) {
        let points = yaws.iter().map(|&y| ring_point(y, 10.0)).collect();
        let rows = unfold_rows(&PointCloud::new(points), 310.0, None).unwrap();
        prop_assert_eq!(rows[0], 0);
        prop_assert!(rows.windows(2).all(|r| r[1] == r[0] || r[1] == r[0] + 1));
    }

    #[test]
    fn k1_backprojection_is_identity_without_collisions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = CloudSpec { rows: 6, width: 64, ..CloudSpec::default() };
        let s = synthetic_cloud(&mut rng, &spec);
        let cfg = ProjectionConfig { width: 64, rows: Some(6), ..ProjectionConfig::default() };
        let p = project(&s.cloud, Some(&s.labels), &cfg).unwrap();
        let bp = BackprojectConfig { k: 1, window: (3, 3), ignore_id: 0 };
        let out = backproject_knn(p.labels.as_ref().unwrap(), &p.image, &s.cloud, &bp).unwrap();
        prop_assert_eq!(out, s.labels);
    }
}
