//! File formats, dataset directories and the command-line driver around
//! [`pdt_core`].

pub mod checkpoint;
pub mod cli;
pub mod images;
pub mod lookbook;
pub mod report;
