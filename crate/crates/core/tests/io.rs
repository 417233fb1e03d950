use lapirn::crn::{LapirnParams, LapirnShape};
use lapirn::diffeo::TransformKind;
use lapirn::io::{
    decode_tensor, encode_tensor, export_pgm, load_field, load_labels, params_from_checkpoint, params_to_checkpoint,
    parse_kv, format_kv, save_field, save_labels, Checkpoint, Tensor,
};
use lapirn::{Error, Field, LabelMap};
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..5)
}

fn field_strategy() -> impl Strategy<Value = Field> {
    shape_strategy().prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        let value = any::<f32>().prop_filter("finite", |x| x.is_finite());
        prop::collection::vec(value, n).prop_map(move |d| Field::new(shape.clone(), d).unwrap())
    })
}

fn labels_strategy() -> impl Strategy<Value = LabelMap> {
    shape_strategy().prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<u16>(), n).prop_map(move |d| LabelMap::new(shape.clone(), d).unwrap())
    })
}

fn bits(f: &Field) -> Vec<u32> {
    f.data().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn f32_tensor_round_trip(f in field_strategy()) {
        let back = decode_tensor(&encode_tensor(&Tensor::F32(f.clone()))).unwrap().into_field().unwrap();
        prop_assert_eq!(back.shape(), f.shape());
        prop_assert_eq!(bits(&back), bits(&f));
    }

    #[test]
    fn u16_tensor_round_trip(l in labels_strategy()) {
        let back = decode_tensor(&encode_tensor(&Tensor::U16(l.clone()))).unwrap().into_labels().unwrap();
        prop_assert_eq!(back, l);
    }

    #[test]
    fn checkpoint_round_trip(
        fields in prop::collection::vec(field_strategy(), 1..4),
        labels in labels_strategy(),
        cfg in prop::collection::vec(("[a-z_]{1,8}", "[ -~]{0,12}"), 0..5),
    ) {
        let mut entries: Vec<(String, Tensor)> =
            fields.into_iter().enumerate().map(|(i, f)| (format!("t{i}"), Tensor::F32(f))).collect();
        entries.push(("labels".into(), Tensor::U16(labels)));
        let mut config = cfg;
        config.sort();
        config.dedup_by(|a, b| a.0 == b.0);
        let ckpt = Checkpoint { entries, config };
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(back, ckpt);
    }
}

#[test]
fn network_parameters_round_trip() {
    for mode in [TransformKind::Diffeo, TransformKind::Displacement] {
        let mut p = LapirnParams::init(
            LapirnShape {
                dim: 2,
                levels: 3,
                channels: 4,
                resblocks: 2,
            },
            mode,
            11,
        );
        p.velocity_scale = 0.3;
        p.reintegrate = true;
        let extra = vec![("lr".to_string(), "0.0005".to_string())];
        let bytes = params_to_checkpoint(&p, &extra).encode().unwrap();
        let ckpt = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ckpt.config_value("lr"), Some("0.0005"));
        assert_eq!(params_from_checkpoint(&ckpt).unwrap(), p);
    }
}

#[test]
fn checkpoint_with_missing_tensor_is_rejected() {
    let p = LapirnParams::init(LapirnShape { dim: 2, levels: 2, channels: 4, resblocks: 1 }, TransformKind::Diffeo, 0);
    let mut ckpt = params_to_checkpoint(&p, &[]);
    ckpt.entries.pop();
    assert!(matches!(params_from_checkpoint(&ckpt), Err(Error::Data(_))));
}

#[test]
fn corrupt_streams_are_rejected() {
    let bytes = encode_tensor(&Tensor::F32(Field::full(&[2, 3], 1.0)));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_tensor(&bad), Err(Error::Data(_))));
    assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
    let mut ckpt = Checkpoint { entries: vec![], config: vec![] }.encode().unwrap();
    ckpt[3] = b'0';
    assert!(Checkpoint::decode(&ckpt).is_err());
}

#[test]
fn files_round_trip_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let f = Field::from_fn(&[1, 4, 5], |_, p| p[0] as f32 - 0.25 * p[1] as f32);
    let l = LabelMap::new(vec![1, 4, 5], (0..20).collect()).unwrap();
    save_field(dir.path().join("f.lpt"), &f).unwrap();
    save_labels(dir.path().join("l.lpt"), &l).unwrap();
    assert_eq!(load_field(dir.path().join("f.lpt")).unwrap(), f);
    assert_eq!(load_labels(dir.path().join("l.lpt")).unwrap(), l);
    assert!(load_labels(dir.path().join("f.lpt")).is_err());
    assert!(matches!(load_field(dir.path().join("nope.lpt")), Err(Error::Data(_))));
}

#[test]
fn key_value_config_round_trip() {
    let kv = vec![("mode".to_string(), "diffeo".to_string()), ("lr".to_string(), "1e-4".to_string())];
    assert_eq!(parse_kv(&format_kv(&kv).unwrap()).unwrap(), kv);
    assert!(format_kv(&[("a=b".into(), "c".into())]).is_err());
}

#[test]
fn pgm_export_writes_a_binary_graymap() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    let f = Field::from_fn(&[1, 3, 4], |_, p| (p[0] * 4 + p[1]) as f32);
    export_pgm(&path, &f, 0).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P5\n4 3\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 12);
    assert_eq!((pixels[0], pixels[11]), (0, 255));
}
