#![allow(dead_code)]

pub mod oracles;
