//! Regression testing for classification prompts served by hosted LLM APIs.
//!
//! The pipeline is: versioned [`datasets`] and [`prompts`] are run against a
//! model through [`providers`] by the [`runner`], which stores every sample in
//! a content-addressed run store. [`analysis`] compares two stored runs and
//! [`regress`] turns comparisons into PASS/FAIL/INCONCLUSIVE verdicts.
//! [`driftsim`] generates synthetic model pairs with known drift to check the
//! statistics themselves.

pub mod analysis;
pub mod canonical;
pub mod cli;
pub mod datasets;
pub mod driftsim;
pub mod par;
pub mod prompts;
pub mod providers;
pub mod regress;
pub mod report;
pub mod runner;
