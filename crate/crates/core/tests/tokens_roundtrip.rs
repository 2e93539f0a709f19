use htp_core::rng::substream;
use htp_core::rqvae::{downsample_len, upsample_len, ParityRecord, PatternCode};
use htp_core::tokens::{decode_pattern_tokens, encode_pattern_tokens, parity_to_token, Token, Vocabulary};
use proptest::prelude::*;
use rand::Rng;

const SIZES: [usize; 4] = [32, 64, 128, 256];

fn random_code<R: Rng>(rng: &mut R) -> PatternCode {
    let n = rng.random_range(8..=512);
    let (m, parity) = downsample_len(n).unwrap();
    PatternCode {
        indices: SIZES.iter().map(|&c| (0..m).map(|_| rng.random_range(0..c)).collect()).collect(),
        parity,
    }
}

#[test]
fn codec_roundtrip_on_random_codes() {
    let vocab = Vocabulary::new(1520, SIZES.to_vec()).unwrap();
    let mut rng = substream(5, "codes");
    for _ in 0..1000 {
        let code = random_code(&mut rng);
        let ids = encode_pattern_tokens(&code, &vocab).unwrap();
        assert_eq!(decode_pattern_tokens(&ids, &vocab).unwrap(), code);
        let text = vocab.render(&ids).unwrap();
        assert_eq!(vocab.parse_sequence(&text).unwrap(), ids);
    }
}

#[test]
fn vocabulary_size_and_parity_token() {
    let vocab = Vocabulary::new(1520, SIZES.to_vec()).unwrap();
    assert_eq!(vocab.len(), 1520 + 480 + 12);
    let p = ParityRecord::from_ints([1, 1, 1]).unwrap();
    assert_eq!(parity_to_token(p), 7);
    assert_eq!(vocab.token(vocab.id(Token::Length(7)).unwrap()).unwrap().to_string(), "<t_7>");
}

#[test]
fn pattern_region_is_four_tokens_per_position() {
    let vocab = Vocabulary::new(10, SIZES.to_vec()).unwrap();
    let mut rng = substream(6, "compression");
    for _ in 0..200 {
        let code = random_code(&mut rng);
        let ids = encode_pattern_tokens(&code, &vocab).unwrap();
        let p_begin = vocab.id(Token::PBegin).unwrap();
        let start = ids.iter().position(|&i| i == p_begin).unwrap() + 1;
        assert_eq!(ids.len() - start - 1, 4 * code.len());
        let n = upsample_len(code.len(), code.parity);
        assert!(code.len() <= n.div_ceil(8) + 1);
    }
}

proptest! {
    #[test]
    fn length_parity_roundtrip(n in 8usize..5000) {
        let (m, p) = downsample_len(n).unwrap();
        prop_assert_eq!(upsample_len(m, p), n);
    }
}
