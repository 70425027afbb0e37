use bnn_rram_core::bitlinalg::{
    binary_matvec, pack_signs, reference_dot, signed_dot_from_popcount, xnor_popcount, BitMatrix,
};
use proptest::prelude::*;

fn signs(max_len: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(
        prop::bool::ANY.prop_map(|b| if b { 1i8 } else { -1 }),
        1..=max_len,
    )
}

fn sign_pair(max_len: usize) -> impl Strategy<Value = (Vec<i8>, Vec<i8>)> {
    (1..=max_len).prop_flat_map(|n| {
        let s = prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1i8 } else { -1 }), n);
        (s.clone(), s)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn packed_dot_equals_integer_dot((a, b) in sign_pair(1000)) {
        let (pa, pb) = (pack_signs(&a).unwrap(), pack_signs(&b).unwrap());
        let pc = xnor_popcount(&pa, &pb).unwrap();
        prop_assert_eq!(signed_dot_from_popcount(pc, a.len() as u32).unwrap(), reference_dot(&a, &b).unwrap());
        prop_assert_eq!(pc, xnor_popcount(&pb, &pa).unwrap());
    }

    #[test]
    fn pack_then_unpack_is_identity(a in signs(1000)) {
        prop_assert_eq!(pack_signs(&a).unwrap().to_signs(), a);
    }

    #[test]
    fn matvec_rows_are_bounded_popcounts(
        (rows, cols, w, x) in (1usize..8, 1usize..300).prop_flat_map(|(r, c)| {
            let s = |n| prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1i8 } else { -1 }), n);
            (Just(r), Just(c), s(r * c), s(c))
        })
    ) {
        let m = BitMatrix::from_signs(rows, cols, &w).unwrap();
        let xb = pack_signs(&x).unwrap();
        let out = binary_matvec(&m, &xb).unwrap();
        prop_assert_eq!(out.len(), rows);
        for (r, &pc) in out.iter().enumerate() {
            prop_assert!(pc as usize <= cols);
            let row = &w[r * cols..(r + 1) * cols];
            prop_assert_eq!(2 * i64::from(pc) - cols as i64, reference_dot(row, &x).unwrap());
        }
    }
}
