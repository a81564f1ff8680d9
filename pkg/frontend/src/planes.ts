/** In-plane bases of the three server-rendered orthogonal planes.
 *
 * The service renders each plane through the volume center offset by `pos`
 * millimetres along the plane normal. With an identity direction matrix the
 * bases are: axial u=+x v=+y n=+z; sagittal u=+y v=+z n=+x; coronal
 * u=+x v=+z n=-y (n = u x v). The crosshair math below mirrors that exactly.
 */

import { Plane, Vec3 } from './types.js';

export interface PlaneBasis {
    u: Vec3;
    v: Vec3;
    normal: Vec3;
    /** volume axis index the normal runs along, and its sign */
    normalAxis: 0 | 1 | 2;
    normalSign: 1 | -1;
}

export const PLANE_BASES: Record<Plane, PlaneBasis> = {
    axial: { u: [1, 0, 0], v: [0, 1, 0], normal: [0, 0, 1], normalAxis: 2, normalSign: 1 },
    sagittal: { u: [0, 1, 0], v: [0, 0, 1], normal: [1, 0, 0], normalAxis: 0, normalSign: 1 },
    coronal: { u: [1, 0, 0], v: [0, 0, 1], normal: [0, -1, 0], normalAxis: 1, normalSign: -1 },
};

export const ALL_PLANES: Plane[] = ['axial', 'sagittal', 'coronal'];

export function add(a: Vec3, b: Vec3): Vec3 {
    return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function subtract(a: Vec3, b: Vec3): Vec3 {
    return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function scale(a: Vec3, s: number): Vec3 {
    return [a[0] * s, a[1] * s, a[2] * s];
}

export function dot(a: Vec3, b: Vec3): number {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

/** Lift an in-plane drag 2-vector (mm) into a 3D world displacement. */
export function liftDragTo3d(plane: Plane, du: number, dv: number): Vec3 {
    const basis = PLANE_BASES[plane];
    return add(scale(basis.u, du), scale(basis.v, dv));
}

/** In-plane coordinates of a world point relative to the volume center. */
export function inPlaneCoords(plane: Plane, world: Vec3, center: Vec3): [number, number] {
    const relative = subtract(world, center);
    const basis = PLANE_BASES[plane];
    return [dot(relative, basis.u), dot(relative, basis.v)];
}

/** Normal offset (the `pos` query parameter) of a world point. */
export function planePosition(plane: Plane, world: Vec3, center: Vec3): number {
    return dot(subtract(world, center), PLANE_BASES[plane].normal);
}

/** World point from one plane's in-plane coordinates and normal offset. */
export function worldFromPlane(
    plane: Plane,
    uMm: number,
    vMm: number,
    pos: number,
    center: Vec3,
): Vec3 {
    const basis = PLANE_BASES[plane];
    return add(center, add(scale(basis.u, uMm), add(scale(basis.v, vMm), scale(basis.normal, pos))));
}
