pub mod examples;
pub mod grad;
