//! Analytic parameter gradients of every loss against central differences.

mod common;

use common::grad;
use thsg::config::Variant;

#[test]
fn stage1_generator_gradient() {
    grad::stage1_generator();
}

#[test]
fn stage1_discriminator_gradient() {
    grad::stage1_discriminator();
}

#[test]
fn stage2_generator_gradient() {
    grad::stage2_generator();
}

#[test]
fn stage2_discriminator_gradient() {
    grad::stage2_discriminator();
}

#[test]
fn embedding_objective_gradient_full() {
    grad::embedding_objective(Variant::Full, 5);
}

#[test]
fn embedding_objective_gradient_no_stage2() {
    grad::embedding_objective(Variant::NoStage2, 6);
}

#[test]
fn embedding_objective_gradient_baseline() {
    grad::embedding_objective(Variant::Baseline, 7);
}
