pub mod dataset;
pub mod evalue;
pub mod glm;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod plot;
pub mod survival;
pub mod synth;
