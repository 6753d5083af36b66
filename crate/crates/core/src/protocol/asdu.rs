//! IEC 60870-5-104 application data unit, as carried inside a Q3P frame.
//! Only the ASDU is modeled; the APCI/TCP layer is not.

use serde::{Deserialize, Serialize};

use super::FrameError;

/// Largest ASDU that fits an APDU (253-byte APDU minus the 4 control octets).
pub const MAX_ASDU_LEN: usize = 249;
pub const MIN_ASDU_LEN: usize = 4;

/// Common type identifiers used by the simulator.
pub mod type_id {
    /// Measured value, short floating point (M_ME_NC_1).
    pub const MEASURED_FLOAT: u8 = 13;
    /// Set-point command, short floating point (C_SE_NC_1).
    pub const SETPOINT_FLOAT: u8 = 50;
    /// Single command (C_SC_NA_1).
    pub const SINGLE_COMMAND: u8 = 45;
}

/// Cause of transmission: activation.
pub const COT_ACTIVATION: u8 = 6;
/// Cause of transmission: spontaneous.
pub const COT_SPONTANEOUS: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsduMessage {
    pub type_id: u8,
    pub cause_of_transmission: u8,
    pub common_address: u16,
    pub info_object: Vec<u8>,
}

impl AsduMessage {
    pub fn encoded_len(&self) -> usize {
        MIN_ASDU_LEN + self.info_object.len()
    }

    /// Wire bytes; the common address is little-endian as in IEC 104.
    pub fn to_bytes(&self) -> Result<Vec<u8>, FrameError> {
        let len = self.encoded_len();
        if len > MAX_ASDU_LEN {
            return Err(FrameError::AsduLength(len));
        }
        let mut out = Vec::with_capacity(len);
        out.push(self.type_id);
        out.push(self.cause_of_transmission);
        out.extend_from_slice(&self.common_address.to_le_bytes());
        out.extend_from_slice(&self.info_object);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FrameError> {
        if !(MIN_ASDU_LEN..=MAX_ASDU_LEN).contains(&bytes.len()) {
            return Err(FrameError::AsduLength(bytes.len()));
        }
        Ok(Self {
            type_id: bytes[0],
            cause_of_transmission: bytes[1],
            common_address: u16::from_le_bytes([bytes[2], bytes[3]]),
            info_object: bytes[4..].to_vec(),
        })
    }

    /// Set-point command padded to `total_len` bytes: a 3-byte information
    /// object address, the IEEE-754 value, a qualifier, then filler.
    pub fn setpoint(common_address: u16, ioa: u32, value: f32, total_len: usize) -> Self {
        let mut info = Vec::with_capacity(total_len.saturating_sub(MIN_ASDU_LEN));
        info.extend_from_slice(&ioa.to_le_bytes()[..3]);
        info.extend_from_slice(&value.to_le_bytes());
        info.push(0);
        let want = total_len.clamp(MIN_ASDU_LEN + info.len(), MAX_ASDU_LEN) - MIN_ASDU_LEN;
        info.resize(want, 0);
        Self {
            type_id: type_id::SETPOINT_FLOAT,
            cause_of_transmission: COT_ACTIVATION,
            common_address,
            info_object: info,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_bounds() {
        let m = AsduMessage::setpoint(7, 0x010203, 49.95, 64);
        let b = m.to_bytes().unwrap();
        assert_eq!(b.len(), 64);
        assert_eq!(&b[..4], &[50, 6, 7, 0]);
        assert_eq!(AsduMessage::from_bytes(&b).unwrap(), m);
        assert!(AsduMessage::from_bytes(&[1, 2, 3]).is_err());
        let big = AsduMessage {
            type_id: 1,
            cause_of_transmission: 3,
            common_address: 1,
            info_object: vec![0; 246],
        };
        assert!(big.to_bytes().is_err());
    }
}
