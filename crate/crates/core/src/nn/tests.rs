use super::*;
use crate::rng;

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

fn naive_conv(x: &Tensor, w: &Tensor) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; o * h * wd];
    for oc in 0..o {
        for y in 0..h as isize {
            for xx in 0..wd as isize {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in -r..=r {
                        for kx in -r..=r {
                            let (sy, sx) = (y + ky, xx + kx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            let wi = ((oc * c + ic) * k + (ky + r) as usize) * k + (kx + r) as usize;
                            acc += w.data()[wi] * x.data()[(ic * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(oc * h + y as usize) * wd + xx as usize] = acc;
            }
        }
    }
    Tensor::new(vec![o, h, wd], out).unwrap()
}

fn cdc_at(conv: &CdcConv, store: &ParamStore, x: &Tensor, theta: f64) -> Tensor {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let c = CdcConv { theta, ..conv.clone() };
    c.forward_image(&p, &tape.leaf(x.clone())).unwrap().value()
}

#[test]
fn patch_embed_geometry() {
    let mut r = rng::seeded(1);
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", 3, 32, 32, 8, 16, &mut r).unwrap();
    assert_eq!(pe.num_patches(), 16);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let img = tape.leaf(Tensor::randn(&[3, 32, 32], &mut r));
    assert_eq!(pe.forward(&p, &img).unwrap().shape(), vec![17, 16]);

    let mut big = ParamStore::new();
    let pe = PatchEmbed::new(&mut big, "pe", 3, 224, 224, 16, 4, &mut r).unwrap();
    assert_eq!(pe.num_patches(), 196);

    assert!(PatchEmbed::new(&mut ParamStore::new(), "pe", 3, 30, 32, 8, 16, &mut r).is_err());
}

#[test]
fn zero_image_yields_positional_rows() {
    let mut r = rng::seeded(2);
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", 3, 16, 16, 4, 8, &mut r).unwrap();
    store.set(pe.proj.weight, Tensor::zeros(&[48, 8])).unwrap();
    store.set(pe.proj.bias.unwrap(), Tensor::zeros(&[8])).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = pe.forward(&p, &tape.leaf(Tensor::zeros(&[3, 16, 16]))).unwrap().value();
    let pos = store.get(pe.pos);
    let cls = store.get(pe.cls);
    for i in 1..17 {
        assert_eq!(out.row(i), pos.row(i));
    }
    for j in 0..8 {
        assert_eq!(out.row(0)[j], cls.data()[j] + pos.row(0)[j]);
    }
}

#[test]
fn patch_embed_is_linear_in_the_image() {
    let mut r = rng::seeded(3);
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", 3, 8, 8, 4, 5, &mut r).unwrap();
    let x = Tensor::randn(&[3, 8, 8], &mut r);
    let run = |img: Tensor| {
        let tape = Tape::new();
        let p = store.bind(&tape);
        pe.forward(&p, &tape.leaf(img)).unwrap().value()
    };
    let base = run(Tensor::zeros(&[3, 8, 8]));
    let mut one = run(x.clone());
    one.axpy(-1.0, &base).unwrap();
    let mut scaled = run(x.scaled(2.5));
    scaled.axpy(-1.0, &base).unwrap();
    assert!(close(&scaled, &one.scaled(2.5), 1e-12));
}

#[test]
fn patchify_reads_patches_row_major() {
    let mut r = rng::seeded(4);
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, "pe", 2, 4, 6, 2, 3, &mut r).unwrap();
    let img = Tensor::new(vec![2, 4, 6], (0..48).map(|v| v as f64).collect()).unwrap();
    let tape = Tape::new();
    let rows = pe.patchify(&tape.leaf(img)).unwrap().value();
    assert_eq!(rows.shape(), &[6, 8]);
    // second patch in the first patch row: columns 2..4 of rows 0..2
    assert_eq!(rows.row(1), &[2.0, 3.0, 8.0, 9.0, 26.0, 27.0, 32.0, 33.0]);
}

#[test]
fn cdc_theta_zero_is_vanilla_convolution() {
    let mut r = rng::seeded(5);
    let mut store = ParamStore::new();
    let conv = CdcConv::new(&mut store, "c", 3, 4, 3, 0.0, false, ParamGroup::Adapter, &mut r).unwrap();
    let x = Tensor::randn(&[3, 5, 6], &mut r);
    let got = cdc_at(&conv, &store, &x, 0.0);
    assert!(close(&got, &naive_conv(&x, store.get(conv.weight)), 1e-12));
}

#[test]
fn cdc_theta_one_kills_constant_input() {
    let mut r = rng::seeded(6);
    let mut store = ParamStore::new();
    let conv = CdcConv::new(&mut store, "c", 2, 3, 3, 1.0, false, ParamGroup::Adapter, &mut r).unwrap();
    let got = cdc_at(&conv, &store, &Tensor::full(&[2, 4, 4], 3.7), 1.0);
    assert!(got.data().iter().all(|&v| v.abs() < 1e-12), "{got:?}");
}

#[test]
fn cdc_is_affine_in_theta() {
    let mut r = rng::seeded(7);
    let mut store = ParamStore::new();
    let conv = CdcConv::new(&mut store, "c", 3, 2, 3, 0.7, false, ParamGroup::Adapter, &mut r).unwrap();
    for _ in 0..20 {
        let x = Tensor::randn(&[3, 6, 5], &mut r);
        let y0 = cdc_at(&conv, &store, &x, 0.0);
        let y1 = cdc_at(&conv, &store, &x, 1.0);
        let y7 = cdc_at(&conv, &store, &x, 0.7);
        let mut mix = y1.scaled(0.7);
        mix.axpy(0.3, &y0).unwrap();
        assert!(close(&y7, &mix, 1e-12));
    }
}

#[test]
fn cdc_rejects_bad_theta() {
    let mut r = rng::seeded(8);
    let mut store = ParamStore::new();
    assert!(CdcConv::new(&mut store, "c", 1, 1, 3, 1.2, false, ParamGroup::Adapter, &mut r).is_err());
    assert!(CdcConv::new(&mut store, "c", 1, 1, 3, -0.1, false, ParamGroup::Adapter, &mut r).is_err());
}

fn block(seed: u64) -> (ParamStore, EncoderBlock) {
    let mut r = rng::seeded(seed);
    let mut store = ParamStore::new();
    let b = EncoderBlock::new(&mut store, "blk", 16, (4, 4), 0.7, &mut r).unwrap();
    (store, b)
}

#[test]
fn zero_weights_make_the_block_an_identity() {
    let (mut store, b) = block(9);
    for v in store.values_mut() {
        *v = Tensor::zeros(v.shape());
    }
    let x = Tensor::randn(&[17, 16], &mut rng::seeded(10));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = b.forward(&p, &tape.leaf(x.clone())).unwrap().value();
    assert_eq!(y, x);
}

#[test]
fn single_token_attends_to_itself() {
    let (store, b) = block(11);
    let x = Tensor::randn(&[1, 16], &mut rng::seeded(12));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let h = tape.leaf(x.clone());
    let att = b.attention(&p, &h).unwrap().value();
    let v = h.matmul(&p[b.wv.weight.0]).unwrap().matmul(&p[b.wo.weight.0]).unwrap().value();
    assert!(close(&att, &v, 1e-14));
    let y = b.forward(&p, &h).unwrap().value();
    assert!(y.is_finite() && y.shape() == [1, 16]);
}

#[test]
fn block_preserves_token_shape_and_checks_token_count() {
    let (store, b) = block(13);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.leaf(Tensor::randn(&[17, 16], &mut rng::seeded(14)));
    assert_eq!(b.forward(&p, &x).unwrap().shape(), vec![17, 16]);
    let bad = tape.leaf(Tensor::zeros(&[9, 16]));
    assert!(b.forward(&p, &bad).is_err());
}

#[test]
fn grid_round_trip() {
    let tape = Tape::new();
    let t = tape.leaf(Tensor::randn(&[6, 4], &mut rng::seeded(15)));
    let g = tokens_to_grid(&t, 2, 3).unwrap();
    assert_eq!(g.shape(), vec![1, 4, 2, 3]);
    // channel 1 at spatial (1, 2) is token 5, feature 1
    assert_eq!(g.value().data()[(1 * 2 + 1) * 3 + 2], t.value().data()[5 * 4 + 1]);
    assert_eq!(grid_to_tokens(&g).unwrap().value(), t.value());
}

#[test]
fn instance_norm_zero_mean_unit_variance_per_channel() {
    let tape = Tape::new();
    let g = tape.leaf(Tensor::randn(&[1, 3, 4, 4], &mut rng::seeded(16)).scaled(5.0));
    let y = instance_norm(&g).unwrap().value();
    for c in 0..3 {
        let plane = &y.data()[c * 16..(c + 1) * 16];
        let m: f64 = plane.iter().sum::<f64>() / 16.0;
        let v: f64 = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
    }
}
