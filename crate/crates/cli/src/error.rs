//! The single error shape shared by the CLI (stderr) and the HTTP service.

use serde::{Deserialize, Serialize};
use texid::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    BadImage,
    LowQuality,
    NotFound,
    EmptyGallery,
    /// Invalid parameters or configuration.
    BadRequest,
    /// The gallery is being written.
    Busy,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::BadImage | ErrorCode::LowQuality | ErrorCode::BadRequest => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::EmptyGallery => 409,
            ErrorCode::Busy => 503,
            ErrorCode::Internal => 500,
        }
    }

    /// Process exit status: 2 for usage problems, 1 for everything else.
    pub fn exit_status(self) -> i32 {
        match self {
            ErrorCode::BadRequest => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidImage(_) | Error::InvalidTarget { .. } | Error::ExtractionFailed(_) => ErrorCode::BadImage,
            Error::RejectedLowQuality(_) => ErrorCode::LowQuality,
            Error::NotFound(_) => ErrorCode::NotFound,
            Error::EmptyGallery => ErrorCode::EmptyGallery,
            Error::InvalidConfig(_) => ErrorCode::BadRequest,
            _ => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_and_json() {
        let e = ApiError::from(Error::EmptyGallery);
        assert_eq!(e.code, ErrorCode::EmptyGallery);
        assert_eq!(e.to_json(), r#"{"code":"EmptyGallery","message":"gallery is empty"}"#);
        assert_eq!(ApiError::from(Error::NotFound("x".into())).code.http_status(), 404);
        assert_eq!(
            ApiError::from(Error::InvalidImage("x".into())).code,
            ErrorCode::BadImage
        );
        assert_eq!(
            ApiError::from(Error::CorruptStore("x".into())).code,
            ErrorCode::Internal
        );
        assert_eq!(ApiError::bad_request("x").code.exit_status(), 2);
        assert_eq!(ApiError::from(Error::EmptyGallery).code.exit_status(), 1);
    }
}
