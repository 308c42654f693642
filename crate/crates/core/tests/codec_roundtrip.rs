use czc_core::codec::{self, checkpoint, ArchConfig, Bitstream, CodecModel, CodecTrainConfig};
use czc_core::datamodel::RgbImage;
use czc_core::desk::{generate, DeskConfig};
use czc_core::Error;

fn tiny() -> CodecTrainConfig {
    CodecTrainConfig { arch: ArchConfig { channels: 8, latent: 8, hyper: 8 }, epochs: 2, batch_size: 4, ..Default::default() }
}

fn images(seed: u64, per_class: usize) -> Vec<RgbImage> {
    let ds = generate(&DeskConfig { classes: 4, train_per_class: per_class, test_per_class: 0, size: 32, seed }).unwrap();
    ds.train.into_iter().map(|s| s.image).collect()
}

fn trained() -> (CodecModel, Vec<RgbImage>) {
    let imgs = images(1, 3);
    let refs: Vec<&RgbImage> = imgs.iter().collect();
    let (mut m, log) = codec::train_initial(&refs, &tiny()).unwrap();
    assert_eq!(log.epoch_losses.len(), 2);
    m.freeze_decoder_side();
    (m, imgs)
}

#[test]
fn encode_decode_is_deterministic_and_sized() {
    let (m, imgs) = trained();
    for img in &imgs[..4] {
        let a = codec::encode(&m, img).unwrap();
        let b = codec::encode(&m, img).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!((a.orig_h, a.orig_w, a.pad_h, a.pad_w), (32, 32, 32, 32));
        let back = Bitstream::from_bytes(&a.to_bytes()).unwrap();
        let x1 = codec::decode(&m, &back).unwrap();
        assert_eq!(x1, codec::decode(&m, &a).unwrap());
        assert_eq!((x1.height, x1.width), (32, 32));
    }
}

#[test]
fn odd_sizes_are_padded_and_cropped() {
    let (m, imgs) = trained();
    let crop = imgs[0].crop(0, 0, 20, 26);
    let b = codec::encode(&m, &crop).unwrap();
    assert_eq!((b.orig_h, b.orig_w, b.pad_h, b.pad_w), (21, 27, 32, 32));
    let out = codec::decode(&m, &b).unwrap();
    assert_eq!((out.height, out.width), (21, 27));
}

#[test]
fn damaged_streams_are_rejected() {
    let (m, imgs) = trained();
    // Noise yields a payload long enough that truncation shows past the flush slack.
    let noise = RgbImage::new(64, 64, (0..64 * 64 * 3).map(|i| ((i * 7919) % 251) as u8).collect()).unwrap();
    let mut b = codec::encode(&m, &noise).unwrap();
    assert!(b.main.len() > 16, "payload only {} bytes", b.main.len());
    b.main.truncate(b.main.len() / 2);
    assert!(matches!(codec::decode(&m, &b), Err(Error::CorruptStream(_))));
    let bytes = codec::encode(&m, &imgs[0]).unwrap().to_bytes();
    assert!(matches!(Bitstream::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::CorruptStream(_))));
}

#[test]
fn foreign_decoder_is_incompatible() {
    let (m, imgs) = trained();
    let b = codec::encode(&m, &imgs[0]).unwrap();
    let refs: Vec<&RgbImage> = imgs.iter().collect();
    let (mut other, _) = codec::train_initial(&refs, &CodecTrainConfig { seed: 99, ..tiny() }).unwrap();
    other.freeze_decoder_side();
    assert_ne!(other.frozen_digest(), m.frozen_digest());
    match codec::decode(&other, &b) {
        Err(Error::IncompatibleModel { expected, found, .. }) => {
            assert_eq!(expected, m.frozen_digest());
            assert_eq!(found, other.frozen_digest());
        }
        other => panic!("expected an incompatible-model error, got {other:?}"),
    }
}

#[test]
fn finetuning_keeps_old_streams_decodable() {
    let (mut m, imgs) = trained();
    let streams: Vec<Bitstream> = imgs[..5].iter().map(|i| codec::encode(&m, i).unwrap()).collect();
    let before: Vec<RgbImage> = streams.iter().map(|b| codec::decode(&m, b).unwrap()).collect();
    let digest = m.frozen_digest();
    let fresh = images(7, 2);
    let refs: Vec<&RgbImage> = fresh.iter().collect();
    codec::finetune_encoder(&mut m, &refs, 1, &tiny()).unwrap();
    assert_eq!(m.frozen_digest(), digest);
    for (b, x) in streams.iter().zip(&before) {
        assert_eq!(&codec::decode(&m, b).unwrap(), x);
    }
    // Fine-tuning needs a frozen decoder side.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut unfrozen = CodecModel::new(&mut rng, tiny().arch, 16384.0);
    assert!(codec::finetune_encoder(&mut unfrozen, &refs, 1, &tiny()).is_err());
}

#[test]
fn checkpoint_preserves_bitstreams() {
    let (m, imgs) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.ckpt");
    checkpoint::save(&m, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.frozen_digest(), m.frozen_digest());
    let b = codec::encode(&m, &imgs[2]).unwrap();
    assert_eq!(codec::encode(&loaded, &imgs[2]).unwrap(), b);
    assert_eq!(codec::decode(&loaded, &b).unwrap(), codec::decode(&m, &b).unwrap());
}

#[test]
fn rate_estimate_tracks_payload() {
    let (m, imgs) = trained();
    for img in &imgs[..4] {
        let code = codec::analyze(&m, img).unwrap();
        let est = codec::estimated_rate_bits(&m, &code);
        let b = codec::encode_code(&m, &code, 32, 32);
        let actual = b.payload_bits() as f64;
        assert!((actual - est).abs() <= 0.05 * est + 64.0, "actual {actual} vs estimate {est}");
    }
}
