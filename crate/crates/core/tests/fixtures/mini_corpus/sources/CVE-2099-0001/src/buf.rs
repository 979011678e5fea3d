use std::ptr;

pub struct Buf {
    data: Vec<u8>,
}

impl Buf {
    pub fn new() -> Self {
        Buf { data: Vec::new() }
    }

    pub fn take(&mut self) -> Vec<u8> {
        let out = unsafe { ptr::read(&self.data) };
        out
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
}
