/** Wire types of the ablreg session service HTTP/JSON API. */

export type Plane = 'axial' | 'sagittal' | 'coronal';
export type BlendMode = 'alpha' | 'checkerboard';

export type Vec3 = [number, number, number];

export interface SessionInfo {
    dims: [number, number, number];
    spacing: Vec3;
    origin: Vec3;
    size_mm: Vec3;
    center: Vec3;
    rigid_done: boolean;
}

export interface MetricsSummary {
    warp_version: number;
    edits: number;
    dcl_rigid_mean?: number;
    dcl_rigid_sd?: number;
    dcl_current_mean?: number;
    dcl_current_sd?: number;
    ld_mean?: number;
    ld_sd?: number;
}

export type ControlPointRole = 'anchor' | 'movable';

export interface ControlPointJson {
    id: number;
    position: Vec3;
    displacement: Vec3;
    role: ControlPointRole;
}

export interface ControlPointSetJson {
    points: ControlPointJson[];
}

export interface RigidDiagnostics {
    iterations: number;
    sigma2: number;
    monotone: boolean;
    converged: boolean;
    final_loglik: number | null;
}

export interface RigidResult {
    t_rigid: unknown;
    diagnostics: RigidDiagnostics;
}

export interface AuditEvent {
    point_id: number;
    displacement: Vec3;
}

export interface ServiceErrorBody {
    code: string;
    message: string;
    stage: string;
}

/** Error raised for every non-2xx response; carries the JSON error body. */
export class ServiceError extends Error {
    constructor(
        readonly status: number,
        readonly body: ServiceErrorBody,
    ) {
        super(`${body.code}: ${body.message}`);
        this.name = 'ServiceError';
    }
}
