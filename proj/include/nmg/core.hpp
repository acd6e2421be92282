/*
 * Copyright 2026 The nmgsim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

namespace nmg {

using Complex = std::complex<double>;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Amplitude-invariant DQ quantities are peak phase values; controllers and
// reports use line-to-line RMS magnitudes. |v_dq| * sqrt(3/2) = V_LL,rms.
inline constexpr double kDqToLineRms = 1.2247448713915890491;  // sqrt(3/2)
inline constexpr double kLineRmsToDq = 0.81649658092772603273; // sqrt(2/3)

// ---------------------------------------------------------------------------
// Errors. Every failure the library reports derives from nmg::Error so the
// CLI can map it onto an exit code in one place.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define NMG_DEFINE_ERROR(Name)                                                 \
    class Name : public Error {                                                \
    public:                                                                    \
        using Error::Error;                                                    \
    }

NMG_DEFINE_ERROR(SingularMatrix);
NMG_DEFINE_ERROR(NoConvergence);
NMG_DEFINE_ERROR(NonFiniteDerivative);
NMG_DEFINE_ERROR(DegenerateEigenvector);
NMG_DEFINE_ERROR(TopologyError);
NMG_DEFINE_ERROR(UnknownId);
NMG_DEFINE_ERROR(SyncNotReady);
NMG_DEFINE_ERROR(NotSettled);
NMG_DEFINE_ERROR(NotAtEquilibrium);
NMG_DEFINE_ERROR(EmptyWindow);
NMG_DEFINE_ERROR(ConfigError);

#undef NMG_DEFINE_ERROR

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line, std::size_t column)
        : Error(what + " (line " + std::to_string(line) + ", column " +
                std::to_string(column) + ")"),
          line_(line), column_(column) {}

    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }

private:
    std::size_t line_;
    std::size_t column_;
};

class NonFiniteState : public Error {
public:
    NonFiniteState(double time, std::string channel)
        : Error("non-finite state at t=" + std::to_string(time) + " s in " +
                channel),
          time_(time), channel_(std::move(channel)) {}

    double time() const noexcept { return time_; }
    const std::string& channel() const noexcept { return channel_; }

private:
    double time_;
    std::string channel_;
};

// ---------------------------------------------------------------------------
// A (d, q) pair. Kept as a plain aggregate; the complex view is used where
// rotating-frame algebra reads better.

struct Dq {
    double d = 0.0;
    double q = 0.0;

    constexpr Dq operator+(Dq o) const { return {d + o.d, q + o.q}; }
    constexpr Dq operator-(Dq o) const { return {d - o.d, q - o.q}; }
    constexpr Dq operator*(double s) const { return {d * s, q * s}; }
    constexpr Dq& operator+=(Dq o) {
        d += o.d;
        q += o.q;
        return *this;
    }
    constexpr Dq& operator-=(Dq o) {
        d -= o.d;
        q -= o.q;
        return *this;
    }
    constexpr bool operator==(const Dq&) const = default;

    double norm() const { return std::hypot(d, q); }
    double angle() const { return std::atan2(q, d); }
    Complex complex() const { return {d, q}; }
    static Dq from(Complex c) { return {c.real(), c.imag()}; }
};

inline constexpr Dq operator*(double s, Dq v) { return v * s; }

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
    a = std::remainder(a, kTwoPi);
    if (a <= -kPi) a += kTwoPi;
    return a;
}

namespace units {

inline constexpr double hz_to_rad(double f) { return kTwoPi * f; }
inline constexpr double rad_to_hz(double w) { return w / kTwoPi; }

/// Droop slope conversion: Hz/kW -> rad/s per W.
inline constexpr double droop_p_to_si(double hz_per_kw) {
    return kTwoPi * hz_per_kw / 1000.0;
}
inline constexpr double droop_p_from_si(double rad_per_w) {
    return rad_per_w * 1000.0 / kTwoPi;
}
/// Droop slope conversion: V/kvar -> V/var.
inline constexpr double droop_q_to_si(double v_per_kvar) { return v_per_kvar / 1000.0; }
inline constexpr double droop_q_from_si(double v_per_var) { return v_per_var * 1000.0; }

} // namespace units

} // namespace nmg
