// Generated by bounds_oracle.py (mpmath, 60 digits). Do not edit by hand.

pub const COVERING: [(u32, f64); 64] = [
    (1, 4.0),
    (2, 3.2e1),
    (3, 3.3255375505322444036e2),
    (4, 4.096e3),
    (5, 5.7243340223994616228e4),
    (6, 8.84736e5),
    (7, 1.4868360391805412517e7),
    (8, 2.68435456e8),
    (9, 5.159780352e9),
    (10, 1.048576e11),
    (11, 2.240369610138436244e12),
    (12, 5.0096498540544e13),
    (13, 1.16791618585781654e15),
    (14, 2.8296722014797824e16),
    (15, 7.1053309772032865283e17),
    (16, 1.8446744073709551616e19),
    (17, 4.9412369946782710728e20),
    (18, 1.3631146639813244879e22),
    (19, 3.8663311127611964331e23),
    (20, 1.125899906842624e25),
    (21, 3.3617267705444632497e26),
    (22, 1.0279436267585226358e28),
    (23, 3.215510371684647508e29),
    (24, 1.0279563944029090292e31),
    (25, 3.3554432e32),
    (26, 1.1174119155209583554e34),
    (27, 3.7934169638792145393e35),
    (28, 1.3118742147608474814e37),
    (29, 4.6186039010527556324e38),
    (30, 1.6543163447903718822e40),
    (31, 6.0251239482002334052e41),
    (32, 2.2300745198530623142e43),
    (33, 8.384163169625989299e44),
    (34, 3.2002307571813125024e46),
    (35, 1.2396254177816689261e48),
    (36, 4.8708493958471199416e49),
    (37, 1.9406694728774568724e51),
    (38, 7.8373277000035107855e52),
    (39, 3.2070039792941042025e54),
    (40, 1.3292279957849158729e56),
    (41, 5.5786447619568410352e57),
    (42, 2.3700348610376486122e59),
    (43, 1.0189465942741592629e61),
    (44, 4.4319872376361289786e62),
    (45, 1.9497600595268680351e64),
    (46, 8.6734070720277847453e65),
    (47, 3.9004907643054039057e67),
    (48, 1.7728389335693409634e69),
    (49, 8.1422331814338578443e70),
    (50, 3.777893186295716171e72),
    (51, 1.7705127077306146392e74),
    (52, 8.3792757672049022678e75),
    (53, 4.0039632694381964133e77),
    (54, 1.9313947516771914768e79),
    (55, 9.403152599406637671e80),
    (56, 4.6198116588791936952e82),
    (57, 2.2900918034802298393e84),
    (58, 1.1452262930288689084e86),
    (59, 5.7766204289726949637e87),
    (60, 2.9385764323070578992e89),
    (61, 1.5073685118190637349e91),
    (62, 7.7958206062307190246e92),
    (63, 4.0644965705454479028e94),
    (64, 2.1359870359209100824e96),
];
pub const WITH_RADICAND: f64 = 6.7111117991464547108e7;
pub const WITHOUT_RADICAND: f64 = 7.378697629483820667e19;
pub const RATIO_LOG10: f64 = 1.2041185240116292332e1;
pub const WITH_BOUND: f64 = 8.1931375715660773508e1;
pub const WITHOUT_BOUND: f64 = 8.589934593000000012e7;
