//! Protocol messages, wire codec, one-time pad and transport.

pub mod message;
pub mod otp;
pub mod transport;

pub use message::{
    decode_trace, encode_trace, AckRequest, Channel, CodecError, Envelope, ExtKeyRequest, GetKey,
    GetKeyWithId, KeyDelivery, KeyRelay, KeyRelayResponse, KmsDiscoveryRequest,
    KmsDiscoveryResponse, Message, RelayPathInstall, RelayProcessRequest, RelayProcessResponse,
    Status, KEY_MATERIAL_FIELDS, MESSAGE_TYPES,
};
pub use otp::{otp_xor, otp_xor_octets, LengthMismatch};
pub use transport::{FaultAction, FaultEvent, FaultRule, Transport, TransportError};
