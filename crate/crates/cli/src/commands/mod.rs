mod analysis;
mod data;
mod explain;
mod train;

pub use analysis::{eval, plot, saliency};
pub use data::gen_data;
pub use explain::explain;
pub use train::train;
