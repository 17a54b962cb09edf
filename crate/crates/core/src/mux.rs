//! Demultiplexing of inbound datagrams by destination socket id.

use crate::wire::{ControlType, EXT_IDENTITY, HEADER_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Route {
    /// A live connection owns this socket id.
    Connection(u32),
    /// Connection-establishing packet for an unknown id: identity or handshake.
    Guard,
    /// Nothing owns the id and the packet cannot open a connection.
    Drop,
}

/// Routes a raw datagram using only its 16-byte header; nothing is verified
/// or allocated here.
pub fn multiplex_dispatch(datagram: &[u8], is_known: impl Fn(u32) -> bool) -> Route {
    if datagram.len() < HEADER_LEN {
        return Route::Drop;
    }
    let w0 = u32::from_be_bytes(datagram[0..4].try_into().unwrap());
    let dest = u32::from_be_bytes(datagram[12..16].try_into().unwrap());
    if dest != 0 && is_known(dest) {
        return Route::Connection(dest);
    }
    if w0 >> 31 == 1 {
        let ctype = ((w0 >> 16) & 0x7FFF) as u16;
        let ext = (w0 & 0xFFFF) as u16;
        let opens = ctype == ControlType::Handshake.code()
            || (ctype == ControlType::UserDefined.code() && ext == EXT_IDENTITY);
        if opens {
            return Route::Guard;
        }
    }
    Route::Drop
}
