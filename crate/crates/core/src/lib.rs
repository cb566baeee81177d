pub mod eval;
pub mod geom;
pub mod grid;
pub mod learn;
pub mod net;
pub mod sim;
pub mod track;
