pub mod extended;
