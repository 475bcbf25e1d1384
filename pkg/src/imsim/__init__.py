"""Agent-based simulator of reservation-controlled road intersections.

Implements four management mechanisms for intersections whose capacity is
allocated through space-time reservations: first-come-first-served granting
(FCFS), combinatorial-auction control (CA), competitive traffic assignment
through posted prices (CTA), and the integrated auction + pricing mechanism
(CA-CTA).
"""

__version__ = "0.1.0"
