//! Finite-difference checks of the quantizer and language-model losses,
//! evaluated in f64 on cast copies of tiny models.

mod common;

use common::fd;

fn assert_all_pass(reports: &[(String, markupdm_nn::gradcheck::GradCheckReport)], min: usize) {
    assert!(reports.len() >= min, "only {} parameters checked", reports.len());
    for (name, r) in reports {
        assert!(r.passes(fd::TOL), "{name}: {r:?}");
    }
}

#[test]
fn quantizer_gradients() {
    let reports = fd::quantizer_reports();
    assert!(reports.iter().any(|(n, _)| n == "codebook"));
    assert_all_pass(&reports, 10);
}

#[test]
fn quantizer_straight_through_copies_decoder_gradient() {
    assert!(fd::straight_through_error() < 1e-12);
}

#[test]
fn lm_loss_gradients() {
    assert_all_pass(&fd::lm_reports(), 10);
}
